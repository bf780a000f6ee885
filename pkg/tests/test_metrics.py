from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracle import all_vectors, ap_by_ranks, ap_fraction, auc_by_pairs
from essd.errors import LengthMismatch, NoPositives, SingleClassScores
from essd.metrics import (
    ConfusionCounts,
    auc,
    auc_rows,
    average_precision,
    average_precision_rows,
    confusion,
    rank_order,
    rates,
    roc_points,
)


def test_confusion_cases():
    assert confusion([0.9, 0.4], [1, 1], 0.5) == ConfusionCounts(tp=1, fp=0, fn=1, tn=0)
    assert confusion([0.1, 0.2, 0.3], [0, 0, 0], 0.5) == ConfusionCounts(0, 0, 0, 3)


def test_confusion_threshold_modes():
    scores, labels = [0.5, 0.0, -0.1], [1, 0, 1]
    assert confusion(scores, labels, 0.5, inclusive=True).tp == 1
    assert confusion(scores, labels, 0.5, inclusive=False).tp == 0
    assert confusion(scores, labels, 0.0, inclusive=False) == ConfusionCounts(1, 0, 1, 1)


def test_rates_and_undefined():
    r = rates(ConfusionCounts(35, 21, 29, 120))
    assert (round(r.sensitivity, 3), round(r.specificity, 3), round(r.fpr, 3)) == (0.547, 0.851, 0.149)
    r = rates(ConfusionCounts(0, 0, 0, 5))
    assert r.sensitivity is None and r.specificity == 1.0 and r.fpr == 0.0


def test_counts_add():
    assert ConfusionCounts(1, 2, 3, 4) + ConfusionCounts(1, 1, 1, 1) == ConfusionCounts(2, 3, 4, 5)
    assert ConfusionCounts(1, 2, 3, 4).total == 10


def test_auc_cases():
    assert auc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert auc([0.4] * 4, [1, 0, 1, 0]) == 0.5
    assert auc([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]) == 0.75


def test_ap_cases():
    assert average_precision([0.9, 0.1, 0.2], [1, 0, 0]) == 1.0
    # exact rationals, rounded once
    assert average_precision([4, 3, 2, 1], [1, 0, 1, 0]) == float((1 + Fraction(2, 3)) / 2)
    assert average_precision([4, 3, 2, 1], [0, 0, 1, 1]) == float((Fraction(1, 3) + Fraction(2, 4)) / 2)


def test_ap_keys_break_ties():
    scores, labels = [0.5, 0.5], [0, 1]
    assert average_precision(scores, labels) == 0.5
    assert average_precision(scores, labels, keys=["b", "a"]) == 1.0
    assert rank_order([0.5, 0.7, 0.5], ["z", "y", "a"]).tolist() == [1, 2, 0]


def test_metric_errors():
    with pytest.raises(SingleClassScores):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(NoPositives):
        average_precision([0.1, 0.2], [0, 0])
    with pytest.raises(LengthMismatch):
        confusion([0.1], [0, 1], 0.5)
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [0, 2])


def test_roc_points_endpoints():
    pts = roc_points([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0])
    assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)
    assert pts == sorted(pts)


@pytest.mark.parametrize("n", range(1, 7))
def test_row_kernels_match_oracles(n):
    S, labels = all_vectors(n)
    for lab in labels:
        L = np.broadcast_to(lab, S.shape)
        if lab.any():
            assert np.array_equal(average_precision_rows(S, L), ap_by_ranks(S, L))
        if 0 < lab.sum() < n:
            assert np.array_equal(auc_rows(S, L), auc_by_pairs(S, L))


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([0.0, 0.25, 0.5, 1.0, -3.0]), st.integers(0, 1)), min_size=1, max_size=60))
def test_scalar_matches_row_kernel_and_fractions(pairs):
    scores = [p[0] for p in pairs]
    labels = [p[1] for p in pairs]
    if any(labels):
        ap = average_precision(scores, labels)
        assert ap == average_precision_rows([scores], [labels])[0] == ap_fraction(scores, labels)
    if 0 < sum(labels) < len(labels):
        assert auc(scores, labels) == auc_rows([scores], [labels])[0]
        assert auc(scores, labels) == auc_by_pairs(np.array([scores]), np.array([labels]))[0]


def test_long_vectors_use_exact_big_integers():
    rng = np.random.default_rng(4)
    for n in (37, 90, 200):
        scores = rng.choice([0.1, 0.4, 0.7], size=n).tolist()
        labels = rng.integers(0, 2, size=n).tolist()
        labels[0] = 1
        assert average_precision(scores, labels) == ap_fraction(scores, labels)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.tuples(st.floats(-1, 1, allow_nan=False), st.integers(0, 1)), min_size=2, max_size=30),
    st.integers(0, 2**32 - 1),
)
def test_auc_invariances(pairs, seed):
    scores = np.array([p[0] for p in pairs])
    labels = np.array([p[1] for p in pairs])
    if not 0 < labels.sum() < len(labels):
        return
    a = auc(scores, labels)
    assert 0.0 <= a <= 1.0
    # flipping labels mirrors the AUC
    assert auc(scores, 1 - labels) == pytest.approx(1 - a, abs=1e-12)
    # doubling is exact in floating point, so ranks are untouched
    assert auc(2 * scores, labels) == a
    perm = np.random.default_rng(seed).permutation(len(scores))
    assert auc(scores[perm], labels[perm]) == a
