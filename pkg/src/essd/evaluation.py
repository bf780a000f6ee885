"""Reference sets and the leave-one-family-out comparison of ESSD with each SSD."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_write, derive_seed
from .errors import EssdError, MalformedRow
from .forest import predict_proba, tune_mtry
from .metrics import ConfusionCounts, auc, average_precision, confusion, rates, roc_points
from .store import DrugFamily

logger = logging.getLogger(__name__)

METHODS = ("ESSD",) + tuple(f"SSD{k}" for k in range(1, 7))
REFERENCE_COLUMNS = ("family_prefix", "event_code", "label")


@dataclass(frozen=True, order=True)
class LabeledPair:
    family_prefix: str
    event_code: str
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")


def read_reference(path) -> list[LabeledPair]:
    pairs: dict[tuple[str, str], LabeledPair] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in REFERENCE_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise MalformedRow(path, 1, missing[0], "column missing from header")
        for row in reader:
            line = reader.line_num
            try:
                fam = DrugFamily.parse(row["family_prefix"]).code
            except ValueError as exc:
                raise MalformedRow(path, line, "family_prefix", str(exc)) from None
            if row["label"].strip() not in ("0", "1"):
                raise MalformedRow(path, line, "label", f"expected 0 or 1, got {row['label']!r}")
            pair = LabeledPair(fam, row["event_code"].strip(), int(row["label"]))
            key = (pair.family_prefix, pair.event_code)
            if key in pairs:
                raise MalformedRow(path, line, "event_code", f"duplicate pair {key}")
            pairs[key] = pair
    return sorted(pairs.values())


def write_reference(path, pairs) -> None:
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REFERENCE_COLUMNS)
        for p in sorted(pairs):
            w.writerow((p.family_prefix, p.event_code, p.label))


@dataclass(frozen=True)
class MethodResult:
    counts: ConfusionCounts
    auc: float | None
    ap: float | None
    roc: list

    def as_dict(self) -> dict:
        r = rates(self.counts)
        return {
            "tp": self.counts.tp,
            "fp": self.counts.fp,
            "fn": self.counts.fn,
            "tn": self.counts.tn,
            "sensitivity": r.sensitivity,
            "specificity": r.specificity,
            "fpr": r.fpr,
            "auc": self.auc,
            "ap": self.ap,
            "roc": [list(p) for p in self.roc],
        }


def score_method(scores, labels, keys, threshold: float, inclusive: bool) -> MethodResult:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    both = 0 < labels.sum() < len(labels)
    return MethodResult(
        confusion(scores, labels, threshold, inclusive),
        auc(scores, labels) if both else None,
        average_precision(scores, labels, keys) if labels.any() else None,
        roc_points(scores, labels),
    )


@dataclass
class Evaluation:
    number: int
    held_out: str
    training_families: list
    optimal_mtry: int
    training_auc: float
    methods: dict  # name -> MethodResult
    scores: dict  # name -> array of held-out scores
    labels: np.ndarray
    keys: list


@dataclass
class EvaluationReport:
    evaluations: list
    pooled: dict  # name -> MethodResult
    mean_auc: dict
    mean_ap: dict

    def as_dict(self) -> dict:
        out = {"evaluations": {}, "pooled": {}}
        for ev in self.evaluations:
            out["evaluations"][str(ev.number)] = {
                "held_out_family": ev.held_out,
                "training_families": ev.training_families,
                "optimal_mtry": ev.optimal_mtry,
                "training_auc": ev.training_auc,
                "n_pairs": int(len(ev.labels)),
                "n_adr": int(ev.labels.sum()),
                "methods": {m: ev.methods[m].as_dict() for m in METHODS},
            }
        for m in METHODS:
            d = self.pooled[m].as_dict()
            d["mean_auc"] = self.mean_auc[m]
            d["mean_ap"] = self.mean_ap[m]
            out["pooled"][m] = d
        return out

    def table_rows(self):
        for ev in self.evaluations:
            for m in METHODS:
                yield str(ev.number), ev.held_out, m, ev.methods[m]
        for m in METHODS:
            yield "pooled", "", m, self.pooled[m]


def _rows_by_family(rows):
    fams: dict[str, list] = {}
    for r in rows:
        if r.label is None:
            continue
        fams.setdefault(r.family.code, []).append(r)
    for v in fams.values():
        v.sort(key=lambda r: r.event_code)
    return dict(sorted(fams.items()))


def leave_one_family_out(
    rows,
    seed: int,
    mtry_candidates=range(1, 10),
    folds: int = 20,
    n_trees: int = 500,
    essd_threshold: float = 0.5,
    ssd_threshold: float = 0.0,
    workers: int | None = None,
) -> EvaluationReport:
    """Train on all but one family, score the held-out family, rotate.

    ESSD signals when the forest probability is ``>= essd_threshold``; a
    single SSD signals when its raw measure is ``> ssd_threshold``. AUC and
    AP are computed on the raw scores.
    """
    fams = _rows_by_family(rows)
    good = [f for f, rs in fams.items() if 0 < sum(r.label for r in rs) < len(rs)]
    if len(good) < 3:
        raise EssdError(f"need at least 3 families with both labels, have {len(good)}: {good}")
    if len(good) < len(fams):
        logger.warning("families without both labels left out: %s", sorted(set(fams) - set(good)))

    evaluations = []
    for number, held in enumerate(good, start=1):
        train = [r for f in good if f != held for r in fams[f]]
        train.sort(key=lambda r: (r.family.code, r.event_code))
        X = np.array([r.vector.values for r in train])
        y = np.array([r.label for r in train])
        tuned = tune_mtry(
            X, y, mtry_candidates, folds, derive_seed(seed, "lofo", held), n_trees, workers=workers
        )
        test = fams[held]
        Xt = np.array([r.vector.values for r in test])
        yt = np.array([r.label for r in test])
        keys = [r.event_code for r in test]
        scores = {"ESSD": predict_proba(tuned.forest, Xt)}
        for k in range(1, 7):
            scores[f"SSD{k}"] = Xt[:, k - 1]
        methods = {}
        for m in METHODS:
            if m == "ESSD":
                methods[m] = score_method(scores[m], yt, keys, essd_threshold, inclusive=True)
            else:
                methods[m] = score_method(scores[m], yt, keys, ssd_threshold, inclusive=False)
        ev = Evaluation(
            number, held, [f for f in good if f != held], tuned.best_mtry,
            tuned.mean_auc[tuned.best_mtry], methods, scores, yt, keys,
        )
        logger.info(
            "evaluation %d (held out %s): mtry=%d ESSD AUC=%s",
            number, held, tuned.best_mtry, methods["ESSD"].auc,
        )
        evaluations.append(ev)

    labels = np.concatenate([ev.labels for ev in evaluations])
    keys = [(k, ev.held_out) for ev in evaluations for k in ev.keys]
    pooled, mean_auc, mean_ap = {}, {}, {}
    for m in METHODS:
        s = np.concatenate([ev.scores[m] for ev in evaluations])
        thr, inc = (essd_threshold, True) if m == "ESSD" else (ssd_threshold, False)
        res = score_method(s, labels, keys, thr, inc)
        counts = ConfusionCounts(0, 0, 0, 0)
        for ev in evaluations:
            counts = counts + ev.methods[m].counts
        assert counts == res.counts
        pooled[m] = res
        aucs = [ev.methods[m].auc for ev in evaluations if ev.methods[m].auc is not None]
        aps = [ev.methods[m].ap for ev in evaluations if ev.methods[m].ap is not None]
        mean_auc[m] = float(np.mean(aucs)) if aucs else None
        mean_ap[m] = float(np.mean(aps)) if aps else None
    return EvaluationReport(evaluations, pooled, mean_auc, mean_ap)


def _fmt(v) -> str:
    return "NA" if v is None else repr(float(v))


def write_report(report: EvaluationReport, json_path, csv_path) -> None:
    with atomic_write(json_path) as fh:
        json.dump(report.as_dict(), fh, indent=2, sort_keys=False)
        fh.write("\n")
    with atomic_write(csv_path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ("evaluation", "held_out_family", "method", "tp", "fp", "fn", "tn",
             "sensitivity", "specificity", "fpr", "auc", "ap")
        )
        for number, held, m, res in report.table_rows():
            r = rates(res.counts)
            c = res.counts
            w.writerow(
                (number, held, m, c.tp, c.fp, c.fn, c.tn,
                 _fmt(r.sensitivity), _fmt(r.specificity), _fmt(r.fpr), _fmt(res.auc), _fmt(res.ap))
            )
