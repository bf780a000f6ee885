"""The six simple-study-design association measures and three ratio features.

Every measure is a risk difference: the proportion of a population with at
least one record of the event inside a window, minus the same proportion in
a counterfactual window or population.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from ._io import derive_seed
from .cohort import (
    MONTH,
    CohortIndex,
    SubstituteCohort,
    WindowEvents,
    build_cohort,
    comparator_cohort,
    match_nonuser_cohort,
    risk_medical_events,
)
from .errors import EmptyPopulation, EssdError, InsufficientFollowUp, MalformedRow
from .store import Dataset, DrugFamily

logger = logging.getLogger(__name__)

FEATURE_NAMES = tuple(f"x{k}" for k in range(1, 10))
YEAR_SLICES = 12


class Anchor(str, Enum):
    INDEX_DATE = "IndexDate"
    SUBSTITUTE_START = "SubstituteStart"


@dataclass(frozen=True)
class RiskWindowSpec:
    """Days ``[offset, offset + length - 1]`` relative to the anchor."""

    anchor: Anchor
    offset_days: int
    length_days: int
    depth_map: int | None = None

    def __post_init__(self):
        if self.length_days < 1:
            raise ValueError("length_days must be >= 1")
        if self.depth_map is not None and not 1 <= self.depth_map <= 5:
            raise ValueError("depth_map must be in [1, 5]")

    @property
    def first_day(self) -> int:
        return self.offset_days

    @property
    def last_day(self) -> int:
        return self.offset_days + self.length_days - 1


MONTH_AFTER = RiskWindowSpec(Anchor.INDEX_DATE, 1, MONTH)
MONTH_BEFORE = RiskWindowSpec(Anchor.INDEX_DATE, -MONTH, MONTH)


@dataclass(frozen=True)
class FeatureVector:
    family: DrugFamily
    event_code: str
    values: tuple[float, ...]  # x1..x9
    support: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.values) != 9:
            raise ValueError("a feature vector has exactly nine values")

    def __getitem__(self, k: int) -> float:
        """1-based access: ``fv[1]`` is x1."""
        return self.values[k - 1]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def _population(population):
    if isinstance(population, CohortIndex):
        return population.patients, population.index_days
    if isinstance(population, SubstituteCohort):
        return population.patients, population.window_starts
    patients, anchors = population
    return np.asarray(patients), np.asarray(anchors)


def risk(dataset: Dataset, population, event_code: str, window: RiskWindowSpec) -> float:
    """Share of the population with the (mapped) event inside the window.

    ``population`` is a cohort, a substitute cohort, or a pair of
    ``(patient_indices, anchor_days)`` arrays.
    """
    patients, anchors = _population(population)
    if not len(patients):
        raise EmptyPopulation("risk over an empty population")
    code = dataset.tree.code_index(event_code)
    target = dataset.tree.ancestor_map(window.depth_map)[code]
    counts = WindowEvents(dataset, patients, anchors).counts(window.first_day, window.last_day, window.depth_map)
    return _ratio(counts[target], len(patients))


def _ratio(count, n) -> float:
    r = int(count) / int(n)
    assert 0.0 <= r <= 1.0
    return r


def derive_ratios(x1: float, x2: float, x4: float, x5: float) -> tuple[float, float, float]:
    """Deviation features: x1 relative to x2, x4 and x5 (falls back to x1 on a zero divisor)."""
    x7 = x1 / x2 if abs(x2) > 0 else x1
    x8 = x1 / x4 if abs(x4) > 0 else x1
    x9 = x1 / x5 if abs(x5) > 0 else x1
    return x7, x8, x9


class FamilyMeasures:
    """Window counts for one family's target and substitute populations.

    All counts are computed once for every event code; the per-pair measures
    are then lookups.
    """

    def __init__(
        self,
        dataset: Dataset,
        cohort: CohortIndex,
        matched: SubstituteCohort | None = None,
        comparator: SubstituteCohort | None = None,
    ):
        if not len(cohort):
            raise EmptyPopulation(f"empty target population for {cohort.family}")
        self.dataset = dataset
        self.cohort = cohort
        self.matched = matched
        self.comparator = comparator
        self.n_target = len(cohort)
        tw = WindowEvents(dataset, cohort.patients, cohort.index_days)
        self._after = {d: tw.counts(1, MONTH, d) for d in (None, 3, 4)}
        self._before = {d: tw.counts(-MONTH, -1, d) for d in (None, 3, 4)}

        # Year-after slices: each member counts only towards slices it fully covers.
        follow = dataset.reg_end[cohort.patients] - cohort.index_days
        self._slices = []
        for s in range(1, YEAR_SLICES + 1):
            lo, hi = 1 + MONTH * s, MONTH + MONTH * s
            covered = follow >= hi
            n = int(covered.sum())
            if n:
                self._slices.append((tw.counts(lo, hi, None, entries=covered), n))

        self._matched = self._comparator = None
        if matched is not None and len(matched):
            mw = WindowEvents(dataset, matched.patients, matched.window_starts)
            self._matched = mw.counts(1, MONTH)
        if comparator is not None and len(comparator):
            cw = WindowEvents(dataset, comparator.patients, comparator.window_starts)
            self._comparator = cw.counts(1, MONTH)

    def _idx(self, event_code: str, depth: int | None = None) -> int:
        tree = self.dataset.tree
        return int(tree.ancestor_map(depth)[tree.code_index(event_code)])

    def risk_after(self, event_code: str, depth: int | None = None) -> float:
        return _ratio(self._after[depth][self._idx(event_code, depth)], self.n_target)

    def risk_before(self, event_code: str, depth: int | None = None) -> float:
        return _ratio(self._before[depth][self._idx(event_code, depth)], self.n_target)

    def ssd1(self, event_code: str) -> float:
        return self.risk_after(event_code) - self.risk_before(event_code)

    def ssd2(self, event_code: str) -> float:
        if not self._slices:
            raise InsufficientFollowUp(f"no member of {self.cohort.family} covers a full follow-up month")
        c = self._idx(event_code)
        year = math.fsum(_ratio(counts[c], n) for counts, n in self._slices) / len(self._slices)
        return self.risk_after(event_code) - year

    def ssd3(self, event_code: str) -> float:
        if self._matched is None:
            raise EmptyPopulation("no matched non-user population")
        return self.risk_after(event_code) - _ratio(self._matched[self._idx(event_code)], len(self.matched))

    def ssd4(self, event_code: str) -> float:
        if self._comparator is None:
            raise EmptyPopulation("no comparator population")
        return self.risk_after(event_code) - _ratio(self._comparator[self._idx(event_code)], len(self.comparator))

    def ssd5(self, event_code: str) -> float:
        return self.risk_after(event_code, 3) - self.risk_before(event_code, 3)

    def ssd6(self, event_code: str) -> float:
        return self.risk_after(event_code, 4) - self.risk_before(event_code, 4)

    def features(self, event_code: str) -> FeatureVector:
        x1, x2, x3, x4, x5, x6 = (
            self.ssd1(event_code), self.ssd2(event_code), self.ssd3(event_code),
            self.ssd4(event_code), self.ssd5(event_code), self.ssd6(event_code),
        )
        x7, x8, x9 = derive_ratios(x1, x2, x4, x5)
        return FeatureVector(
            self.cohort.family,
            event_code,
            (x1, x2, x3, x4, x5, x6, x7, x8, x9),
            {
                "n_target": self.n_target,
                "n_matched": len(self.matched) if self.matched is not None else 0,
                "n_comparator": len(self.comparator) if self.comparator is not None else 0,
            },
        )


def ssd1(dataset, cohort, event):
    return FamilyMeasures(dataset, cohort).ssd1(event)


def ssd2(dataset, cohort, event):
    return FamilyMeasures(dataset, cohort).ssd2(event)


def ssd3(dataset, cohort, matched, event):
    return FamilyMeasures(dataset, cohort, matched=matched).ssd3(event)


def ssd4(dataset, cohort, comparator, event):
    return FamilyMeasures(dataset, cohort, comparator=comparator).ssd4(event)


def ssd5(dataset, cohort, event):
    return FamilyMeasures(dataset, cohort).ssd5(event)


def ssd6(dataset, cohort, event):
    return FamilyMeasures(dataset, cohort).ssd6(event)


@dataclass(frozen=True)
class FeatureConfig:
    seed: int
    washout_days: int = 90
    min_pre_observation_days: int = MONTH
    min_post_observation_days: int = MONTH
    rme_window_days: int = MONTH
    rme_min_patients: int = 3
    match_year_tolerance_max: int = 5
    comparators: dict = field(default_factory=dict)  # target code -> comparator code
    workers: int = 1


@dataclass(frozen=True)
class FeatureRow:
    vector: FeatureVector
    label: int | None

    @property
    def family(self) -> DrugFamily:
        return self.vector.family

    @property
    def event_code(self) -> str:
        return self.vector.event_code


def default_comparator(family: DrugFamily, families) -> DrugFamily:
    """Next family in sorted order (wrapping round) that does not nest with ``family``."""
    others = sorted(f for f in families if not f.overlaps(family))
    if not others:
        raise EssdError(f"no comparator available for {family}")
    later = [f for f in others if f > family]
    return later[0] if later else others[0]


def _family_rows(dataset, family, families, config: FeatureConfig, labels, include_unlabelled):
    comp_code = config.comparators.get(family.code)
    comp_family = DrugFamily.parse(comp_code) if comp_code else default_comparator(family, families)
    cohort = build_cohort(
        dataset, family, config.washout_days,
        config.min_pre_observation_days, config.min_post_observation_days,
    )
    rme = risk_medical_events(dataset, cohort, config.rme_window_days, config.rme_min_patients)
    matched = match_nonuser_cohort(
        dataset, cohort, derive_seed(config.seed, "match", family.code), config.match_year_tolerance_max
    )
    comparator = comparator_cohort(
        dataset, comp_family, cohort, config.washout_days,
        config.min_pre_observation_days, config.min_post_observation_days,
    )
    fm = FamilyMeasures(dataset, cohort, matched, comparator)
    fam_labels = labels.get(family.code, {})
    dropped = sorted(c for c in fam_labels if c not in rme)
    if dropped:
        logger.warning(
            "%s: %d reference pair(s) not among risk medical events, dropped: %s",
            family, len(dropped), ", ".join(dropped[:10]) + (" ..." if len(dropped) > 10 else ""),
        )
    codes = sorted(rme.event_codes) if include_unlabelled else sorted(c for c in fam_labels if c in rme)
    return [FeatureRow(fm.features(c), fam_labels.get(c)) for c in codes]


def _family_rows_safe(args):
    dataset, family, families, config, labels, include_unlabelled = args
    try:
        return family, _family_rows(dataset, family, families, config, labels, include_unlabelled), None
    except EssdError as exc:
        return family, [], exc


def feature_matrix(
    dataset: Dataset,
    families,
    reference,
    config: FeatureConfig,
    include_unlabelled: bool = False,
) -> list[FeatureRow]:
    """Feature rows for every reference pair whose event is a risk event of its family.

    ``reference`` is an iterable of ``LabeledPair``-like objects with
    ``family_prefix``, ``event_code`` and ``label``. With ``include_unlabelled``
    every risk event of every family gets a row, labelled where the reference
    knows it. Families whose cohorts cannot be built are skipped with a
    warning. Rows are ordered by (family, event_code).
    """
    families = sorted({f if isinstance(f, DrugFamily) else DrugFamily.parse(f) for f in families})
    labels: dict[str, dict[str, int]] = {}
    for pair in reference:
        labels.setdefault(pair.family_prefix, {})[pair.event_code] = int(pair.label)
    jobs = [(dataset, f, families, config, labels, include_unlabelled) for f in families]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_family_rows_safe, jobs))
    else:
        results = [_family_rows_safe(j) for j in jobs]
    rows: list[FeatureRow] = []
    for family, fam_rows, exc in results:
        if exc is not None:
            logger.warning("%s skipped: %s: %s", family, exc.category, exc)
            continue
        rows.extend(fam_rows)
    return rows


FEATURE_COLUMNS = ("family_prefix", "event_code") + FEATURE_NAMES + ("label", "n_target", "n_matched", "n_comparator")


def write_features(path, rows) -> None:
    from ._io import atomic_write

    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FEATURE_COLUMNS)
        for r in rows:
            v = r.vector
            w.writerow(
                (v.family.code, v.event_code, *(repr(float(x)) for x in v.values),
                 "" if r.label is None else int(r.label),
                 v.support.get("n_target", ""), v.support.get("n_matched", ""), v.support.get("n_comparator", ""))
            )


def read_features(path) -> list[FeatureRow]:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in FEATURE_COLUMNS[:12] if c not in (reader.fieldnames or [])]
        if missing:
            raise MalformedRow(path, 1, missing[0], "column missing from header")
        for rec in reader:
            line = reader.line_num
            try:
                family = DrugFamily.parse(rec["family_prefix"])
            except ValueError as exc:
                raise MalformedRow(path, line, "family_prefix", str(exc)) from None
            values = []
            for name in FEATURE_NAMES:
                try:
                    x = float(rec[name])
                except ValueError:
                    raise MalformedRow(path, line, name, f"not a number: {rec[name]!r}") from None
                if not math.isfinite(x):
                    raise MalformedRow(path, line, name, "feature must be finite")
                values.append(x)
            label = rec["label"].strip()
            if label not in ("", "0", "1"):
                raise MalformedRow(path, line, "label", f"expected 1, 0 or empty, got {label!r}")
            support = {k: int(rec[k]) for k in ("n_target", "n_matched", "n_comparator") if rec.get(k)}
            rows.append(
                FeatureRow(FeatureVector(family, rec["event_code"], tuple(values), support),
                           int(label) if label else None)
            )
    return rows
