"""Target and substitute populations for a drug family."""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, EmptyCohort, NoControls
from .store import Dataset, DrugFamily

logger = logging.getLogger(__name__)

MONTH = 30


@dataclass(frozen=True, eq=False)
class CohortIndex:
    """New users of a family: one index prescription per patient."""

    family: DrugFamily
    patients: np.ndarray  # patient row indices, ascending
    index_days: np.ndarray
    washout_days: int

    def __len__(self) -> int:
        return len(self.patients)

    def entries(self, dataset: Dataset) -> list[tuple[str, dt.date]]:
        return [
            (dataset.patient_ids[p], dt.date.fromordinal(int(d)))
            for p, d in zip(self.patients, self.index_days)
        ]


@dataclass(frozen=True)
class RiskEventSet:
    family: DrugFamily
    event_codes: frozenset
    min_patients: int
    window_days: int
    support: dict  # event_code -> distinct cohort patients in the window

    def __contains__(self, code) -> bool:
        return code in self.event_codes

    def __len__(self) -> int:
        return len(self.event_codes)


class SubstituteKind(str, Enum):
    MATCHED_NON_USER = "MatchedNonUser"
    COMPARATOR_DRUG = "ComparatorDrug"


@dataclass(frozen=True, eq=False)
class SubstituteCohort:
    """A comparison population. Windows are anchored at ``window_starts``."""

    kind: SubstituteKind
    patients: np.ndarray
    window_starts: np.ndarray
    source_seed: int | None = None
    comparator_family: DrugFamily | None = None

    def __len__(self) -> int:
        return len(self.patients)

    def entries(self, dataset: Dataset) -> list[tuple[str, dt.date]]:
        return [
            (dataset.patient_ids[p], dt.date.fromordinal(int(d)))
            for p, d in zip(self.patients, self.window_starts)
        ]


def _index_prescriptions(dataset, family, washout_days, min_pre, min_post):
    mask = dataset.family_mask(family)
    pat = dataset.rx_patient[mask]
    day = dataset.rx_day[mask]
    # same-day repeats never break a washout, so work on distinct (patient, day)
    keep = np.r_[True, (pat[1:] != pat[:-1]) | (day[1:] != day[:-1])] if len(pat) else np.zeros(0, bool)
    pat, day = pat[keep], day[keep]
    same_patient = np.r_[False, pat[1:] == pat[:-1]]
    prev = np.where(same_patient, np.r_[0, day[:-1]], np.iinfo(np.int64).min // 2)
    qualifies = (day - prev) > washout_days
    qualifies &= day - dataset.reg_start[pat] >= min_pre
    qualifies &= dataset.reg_end[pat] - day >= min_post
    pat, day = pat[qualifies], day[qualifies]
    first = np.r_[True, pat[1:] != pat[:-1]] if len(pat) else np.zeros(0, bool)
    return pat[first], day[first]


def build_cohort(
    dataset: Dataset,
    family: DrugFamily,
    washout_days: int = 90,
    min_pre_observation_days: int = MONTH,
    min_post_observation_days: int = MONTH,
) -> CohortIndex:
    """Index each patient at their earliest qualifying prescription of ``family``.

    A prescription qualifies when no prescription of the family falls in the
    ``washout_days`` before it and the patient is registered for the required
    observation time on both sides.
    """
    pats, days = _index_prescriptions(
        dataset, family, washout_days, min_pre_observation_days, min_post_observation_days
    )
    if not len(pats):
        raise EmptyCohort(f"no qualifying new users of {family}")
    return CohortIndex(family, pats.astype(np.int32), days.astype(np.int64), washout_days)


class WindowEvents:
    """Events of a population, re-expressed as days relative to each entry's anchor.

    Built once per population; every window count afterwards is a mask plus a
    bincount.
    """

    def __init__(self, dataset: Dataset, patients: np.ndarray, anchors: np.ndarray):
        self.dataset = dataset
        self.n = len(patients)
        self.patients = np.asarray(patients)
        self.anchors = np.asarray(anchors, dtype=np.int64)
        lo = dataset.ev_offsets[self.patients]
        hi = dataset.ev_offsets[self.patients + 1]
        lengths = hi - lo
        total = int(lengths.sum())
        self.entry = np.repeat(np.arange(self.n, dtype=np.int64), lengths)
        starts = np.repeat(lo - np.r_[0, np.cumsum(lengths)[:-1]], lengths)
        idx = starts + np.arange(total, dtype=np.int64)
        self.rel_day = dataset.ev_day[idx] - self.anchors[self.entry]
        self.code = dataset.ev_code[idx]

    def counts(self, first_day: int, last_day: int, depth: int | None = None, entries: np.ndarray | None = None) -> np.ndarray:
        """Distinct population members with each (mapped) code in the window.

        ``entries``, when given, is a boolean mask restricting which members count.
        """
        ncodes = len(self.dataset.tree)
        m = (self.rel_day >= first_day) & (self.rel_day <= last_day)
        if entries is not None:
            m &= entries[self.entry]
        codes = self.dataset.tree.ancestor_map(depth)[self.code[m]]
        keys = np.unique(self.entry[m] * ncodes + codes)
        return np.bincount(keys % ncodes, minlength=ncodes)


def risk_medical_events(dataset: Dataset, cohort: CohortIndex, window_days: int = MONTH, min_patients: int = 3) -> RiskEventSet:
    """Events recorded for at least ``min_patients`` cohort members in days [1, window_days]."""
    if not len(cohort):
        raise EmptyCohort(f"empty cohort for {cohort.family}")
    counts = WindowEvents(dataset, cohort.patients, cohort.index_days).counts(1, window_days)
    hit = np.flatnonzero(counts >= min_patients)
    codes = [dataset.tree.codes[c] for c in hit]
    return RiskEventSet(
        cohort.family,
        frozenset(codes),
        min_patients,
        window_days,
        {c: int(counts[i]) for c, i in zip(codes, hit)},
    )


def match_nonuser_cohort(
    dataset: Dataset,
    cohort: CohortIndex,
    seed: int,
    year_tolerance_max: int = 5,
    window_days: int = MONTH,
) -> SubstituteCohort:
    """Sample one never-user of the family per target, matched on gender and year of birth.

    Year tolerance widens from exact to +/- ``year_tolerance_max``; at the first
    tolerance with any free candidate, one is drawn uniformly and removed from
    the pool. Each control gets a uniformly drawn window start leaving
    ``window_days`` of registration afterwards. Unmatched targets are dropped.
    """
    rng = np.random.default_rng(seed)
    ever = np.zeros(dataset.n_patients, dtype=bool)
    ever[dataset.rx_patient[dataset.family_mask(cohort.family)]] = True
    eligible = ~ever & (dataset.reg_end - dataset.reg_start >= window_days)

    pool: dict[tuple[str, int], list[int]] = {}
    for p in np.flatnonzero(eligible):
        pool.setdefault((dataset.gender[p], int(dataset.year_of_birth[p])), []).append(int(p))

    chosen, starts = [], []
    unmatched = 0
    for t in cohort.patients:
        g, y = dataset.gender[t], int(dataset.year_of_birth[t])
        pick = None
        for tol in range(year_tolerance_max + 1):
            keys = [(g, y)] if tol == 0 else [(g, y - tol), (g, y + tol)]
            groups = [pool[k] for k in keys if pool.get(k)]
            total = sum(len(grp) for grp in groups)
            if total:
                r = int(rng.integers(total))
                for grp in groups:
                    if r < len(grp):
                        pick = grp[r]
                        grp[r] = grp[-1]
                        grp.pop()
                        break
                    r -= len(grp)
                break
        if pick is None:
            unmatched += 1
            continue
        chosen.append(pick)
        starts.append(int(rng.integers(dataset.reg_start[pick], dataset.reg_end[pick] - window_days + 1)))
    if unmatched:
        logger.info("%s: %d of %d targets had no matched control", cohort.family, unmatched, len(cohort))
    if not chosen:
        raise NoControls(f"no never-user controls could be matched for {cohort.family}")
    return SubstituteCohort(
        SubstituteKind.MATCHED_NON_USER,
        np.array(chosen, dtype=np.int32),
        np.array(starts, dtype=np.int64),
        source_seed=seed,
    )


def comparator_cohort(
    dataset: Dataset,
    comparator_family: DrugFamily,
    target: CohortIndex,
    washout_days: int = 90,
    min_pre_observation_days: int = MONTH,
    min_post_observation_days: int = MONTH,
) -> SubstituteCohort:
    """New users of a similar family, anchored at their own index prescription.

    Patients indexed on both families on the same date are left out.
    """
    if comparator_family.overlaps(target.family):
        raise ConfigError(
            f"comparator family {comparator_family} must differ from (and not nest with) target {target.family}"
        )
    comp = build_cohort(
        dataset, comparator_family, washout_days, min_pre_observation_days, min_post_observation_days
    )
    target_day = dict(zip(target.patients.tolist(), target.index_days.tolist()))
    keep = np.array(
        [target_day.get(p) != d for p, d in zip(comp.patients.tolist(), comp.index_days.tolist())],
        dtype=bool,
    )
    if not keep.any():
        raise EmptyCohort(f"comparator {comparator_family} has no users after exclusions")
    return SubstituteCohort(
        SubstituteKind.COMPARATOR_DRUG,
        comp.patients[keep],
        comp.index_days[keep],
        comparator_family=comparator_family,
    )
