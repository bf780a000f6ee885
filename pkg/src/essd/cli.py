"""Command-line pipeline: generate -> features -> train -> evaluate -> signal."""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._io import atomic_write, file_sha256
from .config import RunConfig, load_config, validate
from .errors import ConfigError, EssdError
from .evaluation import leave_one_family_out, read_reference, write_report
from .forest import load_forest, predict_proba, save_forest, tune_mtry
from .measures import FeatureConfig, feature_matrix, read_features, write_features
from .store import load_dataset
from .synth import GeneratorConfig, benchmark_suite, generate

logger = logging.getLogger("essd")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    level = os.environ.get("ESSD_LOG", "warn").lower()
    if level not in LOG_LEVELS:
        level = "warn"
    logging.basicConfig(
        level=LOG_LEVELS[level], stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    if args.out is not None:
        cfg.out = Path(args.out)
    validate(cfg)
    cfg.require_seed()
    return cfg


def _write_manifest(out: Path, command: str, cfg_digest: str, inputs: dict, extra=None):
    manifest = {
        "command": command,
        "tool": "essd",
        "version": __version__,
        "config_sha256": cfg_digest,
        "inputs": {k: {"path": str(p), "sha256": file_sha256(p)} for k, p in inputs.items() if p and Path(p).exists()},
        "created_at": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
    }
    if extra:
        manifest.update(extra)
    with atomic_write(out / f"manifest-{command}.json") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _features_path(cfg: RunConfig) -> Path:
    return cfg.features or cfg.out / "features.csv"


def _model_path(cfg: RunConfig) -> Path:
    return cfg.model or cfg.out / "model.txt"


def cmd_generate(args) -> None:
    if args.preset and args.config:
        raise ConfigError("give either --preset or --config, not both")
    if args.preset:
        if args.seed is None:
            raise ConfigError("a seed is required (--seed)")
        cfg = benchmark_suite(args.preset, seed=args.seed)
    elif args.config:
        cfg = GeneratorConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
    else:
        raise ConfigError("generate needs --preset NAME or --config PATH")
    out = Path(args.out or "data")
    paths = generate(cfg, out)
    _write_manifest(
        out, "generate", file_sha256(paths["generator_config"]), {},
        {"preset": args.preset, "seed": cfg.seed, "outputs": sorted(p.name for p in paths.values())},
    )
    print(out)


def cmd_features(args) -> None:
    cfg = _run_config(args)
    ds = load_dataset(*cfg.dataset_paths())
    reference = read_reference(cfg.reference) if cfg.reference else []
    families = cfg.families or sorted({p.family_prefix for p in reference})
    if not families:
        raise ConfigError("no families: set 'families' or give a reference set")
    fcfg = FeatureConfig(
        seed=cfg.seed,
        washout_days=cfg.washout_days,
        min_pre_observation_days=cfg.min_pre_observation_days,
        min_post_observation_days=cfg.min_post_observation_days,
        rme_window_days=cfg.rme_window_days,
        rme_min_patients=cfg.rme_min_patients,
        match_year_tolerance_max=cfg.match_year_tolerance_max,
        comparators=cfg.comparators,
        workers=cfg.workers,
    )
    rows = feature_matrix(ds, families, reference, fcfg, include_unlabelled=True)
    if not rows:
        raise EssdError("no feature rows produced")
    path = _features_path(cfg)
    write_features(path, rows)
    paths = dict(zip(("patients", "events", "prescriptions", "event_tree"), cfg.dataset_paths()))
    if cfg.reference:
        paths["reference"] = cfg.reference
    _write_manifest(
        cfg.out, "features", cfg.digest(), paths,
        {"dataset_counts": ds.provenance["counts"], "dataset_fingerprint": ds.fingerprint(), "rows": len(rows)},
    )
    print(path)


def _labelled(rows, families=None):
    return [r for r in rows if r.label is not None and (not families or r.family.code in families)]


def cmd_train(args) -> None:
    cfg = _run_config(args)
    fpath = _features_path(cfg)
    rows = _labelled(read_features(fpath), cfg.train_families)
    rows.sort(key=lambda r: (r.family.code, r.event_code))
    X = np.array([r.vector.values for r in rows]).reshape(-1, 9)
    y = np.array([r.label for r in rows], dtype=np.int64)
    tuned = tune_mtry(X, y, cfg.mtry_candidates, cfg.folds, cfg.seed, cfg.n_trees, cfg.min_leaf, cfg.workers)
    mpath = _model_path(cfg)
    tuned.forest.metadata["training_families"] = sorted({r.family.code for r in rows})
    save_forest(tuned.forest, mpath)
    with atomic_write(cfg.out / "tuning.json") as fh:
        json.dump(
            {
                "best_mtry": tuned.best_mtry,
                "mean_cv_auc": {str(k): v for k, v in tuned.mean_auc.items()},
                "fold_auc": {str(k): v for k, v in tuned.fold_auc.items()},
                "n_rows": int(len(y)),
                "n_adr": int(y.sum()),
            },
            fh, indent=2,
        )
        fh.write("\n")
    _write_manifest(cfg.out, "train", cfg.digest(), {"features": fpath})
    print(mpath)


def cmd_evaluate(args) -> None:
    cfg = _run_config(args)
    fpath = _features_path(cfg)
    rows = _labelled(read_features(fpath), cfg.families)
    report = leave_one_family_out(
        rows, cfg.seed, cfg.mtry_candidates, cfg.folds, cfg.n_trees,
        cfg.essd_threshold, cfg.ssd_threshold, cfg.workers,
    )
    write_report(report, cfg.out / "report.json", cfg.out / "report.csv")
    _write_manifest(cfg.out, "evaluate", cfg.digest(), {"features": fpath})
    print(cfg.out / "report.json")


def cmd_signal(args) -> None:
    cfg = _run_config(args)
    fpath = _features_path(cfg)
    forest = load_forest(_model_path(cfg))
    rows = read_features(fpath)
    if cfg.signal_families:
        rows = [r for r in rows if r.family.code in cfg.signal_families]
    else:
        rows = [r for r in rows if r.label is None]
    if not rows:
        raise EssdError("no pairs to score")
    prob = predict_proba(forest, np.array([r.vector.values for r in rows]))
    order = sorted(range(len(rows)), key=lambda i: (-prob[i], rows[i].family.code, rows[i].event_code))
    path = cfg.out / "signals.csv"
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("rank", "family_prefix", "event_code", "probability", "classification"))
        for rank, i in enumerate(order, start=1):
            w.writerow(
                (rank, rows[i].family.code, rows[i].event_code, repr(float(prob[i])),
                 "ADR" if prob[i] >= cfg.essd_threshold else "non-ADR")
            )
    _write_manifest(cfg.out, "signal", cfg.digest(), {"features": fpath, "model": _model_path(cfg)})
    print(path)


COMMANDS = {
    "generate": cmd_generate,
    "features": cmd_features,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "signal": cmd_signal,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config (generator JSON for 'generate')")
    common.add_argument("--seed", type=int, help="master seed; required")
    common.add_argument("--workers", type=int, help="parallel workers (results do not depend on it)")
    common.add_argument("--out", help="output directory")
    parser = argparse.ArgumentParser(prog="essd", description=__doc__)
    parser.add_argument("--version", action="version", version=f"essd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    gen = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    gen.add_argument("--preset", help="smoke | standard | confounded")
    for name in ("features", "train", "evaluate", "signal"):
        sub.add_parser(name, parents=[common], help=COMMANDS[name].__name__.replace("cmd_", ""))
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except EssdError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: IOError: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
