"""Run configuration: a flat ``key = value`` text file.

Blank lines and lines starting with ``#`` are ignored. Relative paths are
resolved against the directory of the config file. Lists are
comma-separated; ``mtry_candidates`` also accepts a range such as ``1-9``;
``comparators`` is a list of ``target:comparator`` BNF prefixes.

Example::

    data_dir = data
    reference = data/reference.csv
    families = 05-01-01-01, 05-01-01-02, 05-01-01-03
    comparators = 05-01-01-01:05-01-01-03, 05-01-01-02:05-01-01-03, 05-01-01-03:05-01-01-01
    seed = 7
    n_trees = 500
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .store import DrugFamily

PATH_KEYS = ("data_dir", "patients", "events", "prescriptions", "event_tree", "reference", "features", "model", "out")


@dataclass
class RunConfig:
    seed: int | None = None
    data_dir: Path | None = None
    patients: Path | None = None
    events: Path | None = None
    prescriptions: Path | None = None
    event_tree: Path | None = None
    reference: Path | None = None
    features: Path | None = None
    model: Path | None = None
    out: Path = Path("out")
    families: list = field(default_factory=list)
    comparators: dict = field(default_factory=dict)
    train_families: list = field(default_factory=list)
    signal_families: list = field(default_factory=list)
    washout_days: int = 90
    min_pre_observation_days: int = 30
    min_post_observation_days: int = 30
    rme_window_days: int = 30
    rme_min_patients: int = 3
    match_year_tolerance_max: int = 5
    n_trees: int = 500
    mtry_candidates: list = field(default_factory=lambda: list(range(1, 10)))
    folds: int = 20
    min_leaf: int = 1
    essd_threshold: float = 0.5
    ssd_threshold: float = 0.0
    workers: int = 1

    def dataset_paths(self) -> tuple[Path, Path, Path, Path]:
        paths = []
        for key, default in (
            ("patients", "patients.csv"), ("events", "events.csv"),
            ("prescriptions", "prescriptions.csv"), ("event_tree", "event_tree.csv"),
        ):
            p = getattr(self, key)
            if p is None:
                if self.data_dir is None:
                    raise ConfigError(f"set {key} or data_dir")
                p = self.data_dir / default
            paths.append(p)
        return tuple(paths)

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("a seed is required (config key 'seed' or --seed)")
        return self.seed

    def canonical(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            d[f.name] = str(v) if isinstance(v, Path) else v
        d.pop("workers")  # results do not depend on it
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.canonical(), sort_keys=True, default=str).encode()).hexdigest()


def _split(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _families(value: str) -> list[str]:
    try:
        return [DrugFamily.parse(v).code for v in _split(value)]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _mtry(value: str) -> list[int]:
    out = []
    for part in _split(value):
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return sorted(set(out))


def _comparators(value: str) -> dict:
    out = {}
    for part in _split(value):
        if ":" not in part:
            raise ConfigError(f"comparator entry {part!r} must look like target:comparator")
        a, b = (DrugFamily.parse(x.strip()) for x in part.split(":", 1))
        if a.overlaps(b):
            raise ConfigError(f"comparator {b} must differ from target {a}")
        out[a.code] = b.code
    return out


_PARSERS = {
    "seed": int,
    "families": _families,
    "train_families": _families,
    "signal_families": _families,
    "comparators": _comparators,
    "mtry_candidates": _mtry,
    "essd_threshold": float,
    "ssd_threshold": float,
}


def parse_config(text: str, base_dir: Path | None = None) -> RunConfig:
    cfg = RunConfig()
    known = {f.name for f in dataclasses.fields(RunConfig)}
    base = Path(base_dir) if base_dir else Path(".")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        try:
            if key in PATH_KEYS:
                parsed = base / value
            elif key in _PARSERS:
                parsed = _PARSERS[key](value)
            else:
                parsed = int(value)
        except ValueError as exc:
            raise ConfigError(f"config line {lineno}: bad value for {key}: {exc}") from None
        setattr(cfg, key, parsed)
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(encoding="utf-8"), path.parent)


def validate(cfg: RunConfig) -> None:
    for key in ("washout_days", "min_pre_observation_days", "min_post_observation_days", "match_year_tolerance_max"):
        if getattr(cfg, key) < 0:
            raise ConfigError(f"{key} must be >= 0")
    for key in ("rme_window_days", "rme_min_patients", "n_trees", "folds", "min_leaf", "workers"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be >= 1")
    if not cfg.mtry_candidates or any(not 1 <= m <= 9 for m in cfg.mtry_candidates):
        raise ConfigError("mtry_candidates must be a non-empty subset of 1..9")
    for target, comp in cfg.comparators.items():
        if target == comp:
            raise ConfigError(f"comparator for {target} equals the target")
