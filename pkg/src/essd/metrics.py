"""Threshold and ranking metrics for binary signal detection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import LengthMismatch, NoPositives, SingleClassScores


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class Rates:
    """Ratios with a zero denominator are ``None`` (undefined), never 0."""

    sensitivity: float | None
    specificity: float | None
    fpr: float | None


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise LengthMismatch(f"{len(scores)} scores but {len(labels)} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def confusion(scores: Sequence[float], labels: Sequence[int], threshold: float, inclusive: bool = True) -> ConfusionCounts:
    """Counts when a pair is signalled iff ``score >= threshold`` (``>`` if not inclusive)."""
    scores, labels = _check(scores, labels)
    if not len(scores):
        raise LengthMismatch("no scores")
    signal = scores >= threshold if inclusive else scores > threshold
    pos = labels == 1
    return ConfusionCounts(
        tp=int((signal & pos).sum()),
        fp=int((signal & ~pos).sum()),
        fn=int((~signal & pos).sum()),
        tn=int((~signal & ~pos).sum()),
    )


def rates(counts: ConfusionCounts) -> Rates:
    def div(a, b):
        return a / b if b else None

    return Rates(
        sensitivity=div(counts.tp, counts.tp + counts.fn),
        specificity=div(counts.tn, counts.fp + counts.tn),
        fpr=div(counts.fp, counts.fp + counts.tn),
    )


def _auc_rows(S: np.ndarray, L: np.ndarray) -> np.ndarray:
    """Mann-Whitney AUC of every row of equal-length score/label matrices.

    Each positive earns one point per negative strictly below it and half a
    point per tied negative; both counts come from one stable sort per row.
    """
    m, n = S.shape
    order = np.argsort(S, axis=1, kind="stable")
    s = np.take_along_axis(S, order, axis=1)
    neg = 1 - np.take_along_axis(L, order, axis=1)
    neg_upto = np.cumsum(neg, axis=1)
    neg_before = neg_upto - neg
    cols = np.broadcast_to(np.arange(n), (m, n))
    new_group = np.ones((m, n), dtype=bool)
    new_group[:, 1:] = s[:, 1:] != s[:, :-1]
    last = np.ones((m, n), dtype=bool)
    last[:, :-1] = new_group[:, 1:]
    first_of = np.maximum.accumulate(np.where(new_group, cols, 0), axis=1)
    last_of = np.minimum.accumulate(np.where(last, cols, n - 1)[:, ::-1], axis=1)[:, ::-1]
    below = np.take_along_axis(neg_before, first_of, axis=1)
    not_above = np.take_along_axis(neg_upto, last_of, axis=1)
    # 2 * (below + tied / 2) per positive, summed; integer until the final division
    twice = ((below + not_above) * (1 - neg)).sum(axis=1)
    npos = n - neg_upto[:, -1]
    return twice / (2 * npos * neg_upto[:, -1])


# lcm(1..n) * n stays below 2**53 up to here, so int64 sums divide exactly
_EXACT_INT64_ROWS = 36


def _ap_rows(S: np.ndarray, L: np.ndarray) -> np.ndarray:
    """Average precision of every row; ties keep column order.

    The sum of precisions is formed exactly over the common denominator
    lcm(1..n) and rounded once.
    """
    m, n = S.shape
    order = np.argsort(-S, axis=1, kind="stable")
    ranked = np.take_along_axis(L, order, axis=1)
    hits = np.cumsum(ranked, axis=1)
    denom = math.lcm(*range(1, n + 1))
    if n <= _EXACT_INT64_ROWS:
        scale = denom // np.arange(1, n + 1, dtype=np.int64)
        num = (ranked * hits * scale).sum(axis=1)
        return num / (denom * hits[:, -1])
    scale = np.array([denom // r for r in range(1, n + 1)], dtype=object)
    num = (ranked.astype(object) * hits.astype(object) * scale).sum(axis=1)
    return np.array([int(a) / (denom * int(b)) for a, b in zip(num, hits[:, -1])], dtype=np.float64)


def _matrix(scores, labels):
    S = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    L = np.atleast_2d(np.asarray(labels))
    if S.shape != L.shape:
        raise LengthMismatch(f"score shape {S.shape} but label shape {L.shape}")
    if not np.isin(L, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if np.isnan(S).any():
        raise ValueError("scores must not be NaN")
    return S, L.astype(np.int64)


def auc_rows(scores, labels) -> np.ndarray:
    """Row-wise :func:`auc` for ``(m, n)`` score and label matrices."""
    S, L = _matrix(scores, labels)
    npos = L.sum(axis=1)
    if ((npos == 0) | (npos == L.shape[1])).any():
        raise SingleClassScores("AUC needs at least one positive and one negative in every row")
    return _auc_rows(S, L)


def average_precision_rows(scores, labels) -> np.ndarray:
    """Row-wise :func:`average_precision` (ties in column order) for ``(m, n)`` matrices."""
    S, L = _matrix(scores, labels)
    if (L.sum(axis=1) == 0).any():
        raise NoPositives("average precision needs at least one positive in every row")
    return _ap_rows(S, L)


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC: P(positive ranked above negative), ties count half."""
    scores, labels = _check(scores, labels)
    return float(auc_rows(scores[None, :], labels[None, :])[0])


def rank_order(scores, keys=None) -> np.ndarray:
    """Indices by descending score, ties broken by ascending key (default: position)."""
    scores = np.asarray(scores, dtype=np.float64)
    if keys is None:
        return np.lexsort((np.arange(len(scores)), -scores))
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], keys[i], i))
    return np.asarray(order, dtype=np.int64)


def average_precision(scores: Sequence[float], labels: Sequence[int], keys: Sequence | None = None) -> float:
    """Mean precision at the rank of each positive (no interpolation).

    Tied scores are ordered by ``keys`` ascending, or by position without keys.
    """
    scores, labels = _check(scores, labels)
    if keys is not None:
        order = rank_order(scores, keys)
        scores, labels = scores[order], labels[order]
    return float(average_precision_rows(scores[None, :], labels[None, :])[0])


def roc_points(scores, labels) -> list[tuple[float, float]]:
    """(fpr, sensitivity) at every distinct threshold, from (0, 0) to (1, 1)."""
    scores, labels = _check(scores, labels)
    npos, nneg = int(labels.sum()), int((labels == 0).sum())
    pts = [(0.0, 0.0)]
    for t in np.unique(scores)[::-1]:
        c = confusion(scores, labels, t)
        pts.append((c.fp / nneg if nneg else 0.0, c.tp / npos if npos else 0.0))
    return pts
