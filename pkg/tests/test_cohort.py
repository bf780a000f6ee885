from __future__ import annotations

import datetime as dt

import numpy as np
import pytest

from _support import chain_tree, day, make_dataset
from essd.cohort import (
    SubstituteKind,
    build_cohort,
    comparator_cohort,
    match_nonuser_cohort,
    risk_medical_events,
)
from essd.errors import ConfigError, EmptyCohort, NoControls
from essd.store import DrugFamily

A = DrugFamily.parse("05-01-01-01")
B = DrugFamily.parse("05-01-01-02")
TREE = chain_tree("A", 3)
L1, L2, L3 = "A.1.1.1.1", "A.1.1.1.2", "A.1.1.1.3"


def _patient(pid, yob=1970, gender="M", start=0, end=2000):
    return (pid, yob, gender, day(start), day(end))


def test_washout_blocks_second_prescription(tmp_path):
    ds = make_dataset(
        tmp_path, [_patient("P1", start=0)], [],
        [("P1", day(200), "D1", A.code), ("P1", day(245), "D1", A.code)], TREE,
    )
    cohort = build_cohort(ds, A)
    assert cohort.entries(ds) == [("P1", dt.date(2000, 1, 1) + dt.timedelta(days=200))]


def test_pre_observation_excludes(tmp_path):
    ds = make_dataset(
        tmp_path, [_patient("P1", start=100), _patient("P2")], [],
        [("P1", day(110), "D1", A.code), ("P2", day(300), "D1", A.code)], TREE,
    )
    assert [p for p, _ in build_cohort(ds, A).entries(ds)] == ["P2"]


def test_later_prescription_after_washout_can_index(tmp_path):
    # the first prescription is too close to registration; the one 100 days later qualifies
    ds = make_dataset(
        tmp_path, [_patient("P1", start=100)], [],
        [("P1", day(110), "D1", A.code), ("P1", day(210), "D1", A.code)], TREE,
    )
    assert build_cohort(ds, A).index_days.tolist() == [ds.reg_start[0] + 110]


def test_post_observation_excludes(tmp_path):
    ds = make_dataset(
        tmp_path, [_patient("P1", end=400)], [], [("P1", day(380), "D1", A.code)], TREE,
    )
    with pytest.raises(EmptyCohort):
        build_cohort(ds, A)


def test_no_users_is_empty_cohort(tmp_path):
    ds = make_dataset(tmp_path, [_patient("P1")], [], [("P1", day(300), "D1", B.code)], TREE)
    with pytest.raises(EmptyCohort):
        build_cohort(ds, A)


def test_cohort_against_brute_force(tiny):
    by_patient: dict = {}
    for p, d, b in zip(tiny.rx_patient, tiny.rx_day, tiny.rx_bnf):
        if A.matches(tiny.bnf_codes[b]):
            by_patient.setdefault(tiny.patient_ids[p], set()).add(int(d))
    expected = []
    for pid, days in sorted(by_patient.items()):
        pat = tiny.patient(pid)
        for d in sorted(days):
            washed = all(not (d - 90 <= e < d) for e in days)
            pre = d - pat.reg_start.toordinal() >= 30
            post = pat.reg_end.toordinal() - d >= 30
            if washed and pre and post:
                expected.append((pid, dt.date.fromordinal(d)))
                break
    assert build_cohort(tiny, A).entries(tiny) == expected


# risk medical events

def _rme_dataset(tmp_path, n_two, n_three):
    patients, events, rx = [], [], []
    for k in range(6):
        pid = f"P{k}"
        patients.append(_patient(pid))
        rx.append((pid, day(500), "D1", A.code))
        if k < n_two:
            events.append((pid, day(510), L1))
        if k < n_three:
            events.append((pid, day(530), L2))
        # five patients with L3, but only on day 31 after index
        if k < 5:
            events.append((pid, day(531), L3))
    return make_dataset(tmp_path, patients, events, rx, TREE)


def test_rme_boundary(tmp_path):
    ds = _rme_dataset(tmp_path, 2, 3)
    rme = risk_medical_events(ds, build_cohort(ds, A))
    assert L1 not in rme
    assert L2 in rme and rme.support[L2] == 3
    assert L3 not in rme


def test_rme_against_brute_force(tiny):
    cohort = build_cohort(tiny, A)
    seen: dict = {}
    for pid, index in cohort.entries(tiny):
        codes = set()
        for p, d, c in zip(tiny.ev_patient, tiny.ev_day, tiny.ev_code):
            if tiny.patient_ids[p] == pid and 1 <= d - index.toordinal() <= 30:
                codes.add(tiny.tree.codes[c])
        for c in codes:
            seen[c] = seen.get(c, 0) + 1
    expected = {c for c, n in seen.items() if n >= 3}
    rme = risk_medical_events(tiny, cohort)
    assert set(rme.event_codes) == expected
    assert rme.support == {c: seen[c] for c in expected}


# matching

def test_unique_candidate_is_matched(tmp_path):
    ds = make_dataset(
        tmp_path,
        [_patient("T", 2005, "M"), _patient("C", 2005, "M"), _patient("X", 2005, "F")],
        [], [("T", day(300), "D1", A.code)], TREE,
    )
    matched = match_nonuser_cohort(ds, build_cohort(ds, A), seed=1)
    assert [ds.patient_ids[p] for p in matched.patients] == ["C"]
    assert matched.kind is SubstituteKind.MATCHED_NON_USER


def test_matching_is_seeded(tiny):
    cohort = build_cohort(tiny, A)
    a = match_nonuser_cohort(tiny, cohort, seed=42)
    b = match_nonuser_cohort(tiny, cohort, seed=42)
    assert a.patients.tolist() == b.patients.tolist()
    assert a.window_starts.tolist() == b.window_starts.tolist()


@pytest.mark.parametrize("seed", range(8))
def test_matching_predicates(tiny, seed):
    cohort = build_cohort(tiny, A)
    users = set(tiny.rx_patient[tiny.family_mask(A)].tolist())
    matched = match_nonuser_cohort(tiny, cohort, seed=seed, year_tolerance_max=5)
    assert len(set(matched.patients.tolist())) == len(matched)  # without replacement
    targets = list(cohort.patients)
    for c, start in zip(matched.patients, matched.window_starts):
        assert c not in users
        assert tiny.reg_start[c] <= start <= tiny.reg_end[c] - 30
    # every control has a same-gender target within the tolerance
    for c in matched.patients:
        assert any(
            tiny.gender[t] == tiny.gender[c] and abs(int(tiny.year_of_birth[t]) - int(tiny.year_of_birth[c])) <= 5
            for t in targets
        )


def test_exact_year_preferred(tmp_path):
    patients = [_patient("T", 1970, "F"), _patient("near", 1971, "F"), _patient("exact", 1970, "F")]
    ds = make_dataset(tmp_path, patients, [], [("T", day(300), "D1", A.code)], TREE)
    for seed in range(5):
        matched = match_nonuser_cohort(ds, build_cohort(ds, A), seed=seed)
        assert ds.patient_ids[matched.patients[0]] == "exact"


def test_tolerance_limit(tmp_path):
    patients = [_patient("T", 1970, "F"), _patient("far", 1976, "F")]
    ds = make_dataset(tmp_path, patients, [], [("T", day(300), "D1", A.code)], TREE)
    with pytest.raises(NoControls):
        match_nonuser_cohort(ds, build_cohort(ds, A), seed=0)


def test_no_never_users(tmp_path):
    patients = [_patient("T1"), _patient("T2")]
    rx = [("T1", day(300), "D1", A.code), ("T2", day(400), "D1", A.code)]
    ds = make_dataset(tmp_path, patients, [], rx, TREE)
    with pytest.raises(NoControls):
        match_nonuser_cohort(ds, build_cohort(ds, A), seed=0)


# comparator

def test_comparator_entries_are_new_users(tiny):
    comp = comparator_cohort(tiny, B, build_cohort(tiny, A))
    assert comp.kind is SubstituteKind.COMPARATOR_DRUG
    expected = [e for e in build_cohort(tiny, B).entries(tiny) if e[0] != "P10"]
    assert comp.entries(tiny) == expected


def test_same_day_dual_user_dropped(tmp_path):
    patients = [_patient("P1"), _patient("P2")]
    rx = [
        ("P1", day(300), "D1", A.code), ("P1", day(300), "D2", B.code),
        ("P2", day(300), "D1", A.code), ("P2", day(310), "D2", B.code),
    ]
    ds = make_dataset(tmp_path, patients, [], rx, TREE)
    comp = comparator_cohort(ds, B, build_cohort(ds, A))
    assert [p for p, _ in comp.entries(ds)] == ["P2"]


@pytest.mark.parametrize("comp", ["05-01-01-01", "05-01-01", "05"])
def test_comparator_must_differ(tiny, comp):
    with pytest.raises(ConfigError):
        comparator_cohort(tiny, DrugFamily.parse(comp), build_cohort(tiny, A))


def test_cohort_arrays_consistent(tiny):
    cohort = build_cohort(tiny, A)
    assert len(cohort.patients) == len(cohort.index_days)
    assert np.all(np.diff(cohort.patients) > 0)
