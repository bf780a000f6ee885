"""Random forest over the nine association features.

Trees are grown by a compiled kernel. Split search minimises weighted Gini
impurity, compared with exact integer arithmetic so that equal-impurity
candidates are genuine ties; ties go to the lowest feature index, then the
lowest threshold. Each tree draws its bootstrap and per-node feature subsets
from its own counter-based generator seeded by ``(forest seed, tree index)``,
so the forest is identical whatever the number of threads.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from numba import njit, prange

from ._io import atomic_write, derive_seed
from .errors import ConfigError, EssdError, SingleClassTraining, TooFewRows
from .metrics import auc

logger = logging.getLogger(__name__)

# numba probes an old system TBB before falling back to another threading layer
warnings.filterwarnings("ignore", message="The TBB threading layer")

N_FEATURES = 9
FORMAT_HEADER = "essd-forest 1"
# Impurity comparisons multiply terms of order n**5; stay inside int64.
MAX_TRAINING_ROWS = 6000

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True)
def _next_u64(state):
    state[0] += _GOLDEN
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _randint(state, n):
    return np.int64(_next_u64(state) % np.uint64(n))


@njit(cache=True)
def _midpoint(a, b):
    m = 0.5 * (a + b)
    if m >= b or m < a:
        m = a
    return m


@njit(cache=True)
def _grow(X, y, w, mtry, seed, min_leaf, feat, thr, left, right, value):
    """Grow one tree into the preallocated node arrays; returns the node count.

    ``w`` holds integer row multiplicities (bootstrap counts); rows with zero
    weight are ignored.
    """
    n_features = X.shape[1]
    state = np.empty(1, dtype=np.uint64)
    state[0] = np.uint64(seed)

    rows = np.flatnonzero(w > 0)
    m = rows.shape[0]
    buf = np.empty(m, dtype=np.int64)
    perm = np.empty(n_features, dtype=np.int64)

    stack_node = np.empty(2 * m + 1, dtype=np.int64)
    stack_lo = np.empty(2 * m + 1, dtype=np.int64)
    stack_hi = np.empty(2 * m + 1, dtype=np.int64)
    top = 0
    stack_node[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = m
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = stack_node[top]
        lo = stack_lo[top]
        hi = stack_hi[top]

        wn = np.int64(0)
        wp = np.int64(0)
        for k in range(lo, hi):
            r = rows[k]
            wn += w[r]
            wp += w[r] * y[r]
        value[node] = wp / wn
        feat[node] = -1
        left[node] = -1
        right[node] = -1
        if wp == 0 or wp == wn or wn < 2 * min_leaf:
            continue

        for j in range(n_features):
            perm[j] = j
        for j in range(mtry):
            s = j + _randint(state, n_features - j)
            t = perm[j]
            perm[j] = perm[s]
            perm[s] = t
        chosen = np.sort(perm[:mtry])

        # best so far is "no split": the parent's own impurity, num/den
        best_num = wp * (wn - wp)
        best_den = wn
        best_f = -1
        best_t = 0.0
        for f in chosen:
            vals = np.empty(hi - lo)
            for k in range(lo, hi):
                vals[k - lo] = X[rows[k], f]
            order = np.argsort(vals, kind="mergesort")
            nl = np.int64(0)
            pl = np.int64(0)
            for i in range(hi - lo - 1):
                r = rows[lo + order[i]]
                nl += w[r]
                pl += w[r] * y[r]
                a = vals[order[i]]
                b = vals[order[i + 1]]
                if not a < b:
                    continue
                nr = wn - nl
                if nl < min_leaf or nr < min_leaf:
                    continue
                pr = wp - pl
                num = pl * (nl - pl) * nr + pr * (nr - pr) * nl
                den = nl * nr
                if num * best_den < best_num * den:
                    best_num = num
                    best_den = den
                    best_f = f
                    best_t = _midpoint(a, b)
        if best_f < 0:
            continue

        # stable partition of rows[lo:hi] on x <= threshold
        nleft = 0
        for k in range(lo, hi):
            if X[rows[k], best_f] <= best_t:
                buf[nleft] = rows[k]
                nleft += 1
        nr_ = nleft
        for k in range(lo, hi):
            if not X[rows[k], best_f] <= best_t:
                buf[nr_] = rows[k]
                nr_ += 1
        for k in range(lo, hi):
            rows[k] = buf[k - lo]

        feat[node] = best_f
        thr[node] = best_t
        left[node] = n_nodes
        right[node] = n_nodes + 1
        # push right first so the left subtree is numbered depth-first next
        stack_node[top] = n_nodes + 1
        stack_lo[top] = lo + nleft
        stack_hi[top] = hi
        top += 1
        stack_node[top] = n_nodes
        stack_lo[top] = lo
        stack_hi[top] = lo + nleft
        top += 1
        n_nodes += 2
    return n_nodes


@njit(cache=True)
def _bootstrap(n, state):
    w = np.zeros(n, dtype=np.int64)
    for _ in range(n):
        w[_randint(state, n)] += 1
    return w


@njit(cache=True, parallel=True)
def _grow_forest(X, y, mtry, seeds, min_leaf, feat, thr, left, right, value, n_nodes):
    n = X.shape[0]
    for t in prange(seeds.shape[0]):
        state = np.empty(1, dtype=np.uint64)
        state[0] = seeds[t]
        w = _bootstrap(n, state)
        # the node-level stream continues from the bootstrap stream
        n_nodes[t] = _grow(
            X, y, w, mtry, state[0], min_leaf,
            feat[t], thr[t], left[t], right[t], value[t],
        )


@njit(cache=True, parallel=True)
def _predict(X, feat, thr, left, right, value):
    n_trees = feat.shape[0]
    out = np.empty(X.shape[0])
    for i in prange(X.shape[0]):
        acc = 0.0
        for t in range(n_trees):
            node = 0
            while left[t, node] >= 0:
                if X[i, feat[t, node]] <= thr[t, node]:
                    node = left[t, node]
                else:
                    node = right[t, node]
            acc += value[t, node]
        out[i] = acc / n_trees
    return out


@dataclass(frozen=True, eq=False)
class DecisionTree:
    """Node arrays of one tree. ``feature`` is 0-based; -1 marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def predict(self, X) -> np.ndarray:
        f = Forest.from_trees([self], mtry=N_FEATURES, seed=0)
        return predict_proba(f, X)


@dataclass(frozen=True, eq=False)
class Forest:
    feature: np.ndarray  # (n_trees, max_nodes)
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_nodes: np.ndarray  # (n_trees,)
    mtry: int
    seed: int
    metadata: dict = field(default_factory=dict)

    @property
    def n_trees(self) -> int:
        return len(self.n_nodes)

    def tree(self, t: int) -> DecisionTree:
        k = int(self.n_nodes[t])
        return DecisionTree(
            self.feature[t, :k].copy(), self.threshold[t, :k].copy(),
            self.left[t, :k].copy(), self.right[t, :k].copy(), self.value[t, :k].copy(),
        )

    @property
    def trees(self) -> list[DecisionTree]:
        return [self.tree(t) for t in range(self.n_trees)]

    @classmethod
    def from_trees(cls, trees, mtry: int, seed: int, metadata=None) -> "Forest":
        width = max(t.n_nodes for t in trees)
        shape = (len(trees), width)
        feature = np.full(shape, -1, dtype=np.int64)
        threshold = np.zeros(shape)
        left = np.full(shape, -1, dtype=np.int64)
        right = np.full(shape, -1, dtype=np.int64)
        value = np.zeros(shape)
        for i, t in enumerate(trees):
            k = t.n_nodes
            feature[i, :k], threshold[i, :k] = t.feature, t.threshold
            left[i, :k], right[i, :k], value[i, :k] = t.left, t.right, t.value
        n_nodes = np.array([t.n_nodes for t in trees], dtype=np.int64)
        return cls(feature, threshold, left, right, value, n_nodes, mtry, seed, dict(metadata or {}))


def _as_matrix(X) -> np.ndarray:
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    if X.shape[1] != N_FEATURES:
        raise ValueError(f"expected {N_FEATURES} features per row, got {X.shape[1]}")
    if not np.isfinite(X).all():
        raise ValueError("features must be finite")
    return X


def _check_mtry(mtry):
    if not 1 <= int(mtry) <= N_FEATURES:
        raise ConfigError(f"mtry must be in [1, {N_FEATURES}], got {mtry}")


def train_tree(X, y, mtry: int, sub_seed: int, min_leaf: int = 1, weights=None) -> DecisionTree:
    """Grow a single unpruned tree on the given rows (no bootstrap).

    ``weights`` are optional integer multiplicities, e.g. from a bootstrap.
    """
    X = _as_matrix(X)
    y = np.asarray(y, dtype=np.int64)
    if not len(y):
        raise ValueError("cannot grow a tree on an empty sample")
    _check_mtry(mtry)
    w = np.ones(len(y), dtype=np.int64) if weights is None else np.asarray(weights, dtype=np.int64)
    cap = 2 * len(y) + 1
    feat = np.full(cap, -1, dtype=np.int64)
    thr = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    k = _grow(X, y, w, int(mtry), np.uint64(sub_seed % (1 << 64)), int(min_leaf), feat, thr, left, right, value)
    return DecisionTree(feat[:k], thr[:k], left[:k], right[:k], value[:k])


def _set_threads(workers: int | None):
    if workers:
        numba.set_num_threads(max(1, min(int(workers), numba.config.NUMBA_NUM_THREADS)))


def train_forest(X, y, mtry: int, n_trees: int = 500, seed: int = 0, min_leaf: int = 1, workers: int | None = None) -> Forest:
    """Bagged Gini trees; tree ``t`` uses bootstrap and feature draws seeded by ``(seed, t)``."""
    X = _as_matrix(X)
    y = np.asarray(y, dtype=np.int64)
    _check_mtry(mtry)
    if len(np.unique(y)) < 2:
        raise SingleClassTraining("training data must contain both ADR and non-ADR pairs")
    if len(y) > MAX_TRAINING_ROWS:
        raise EssdError(f"training set of {len(y)} rows exceeds the supported {MAX_TRAINING_ROWS}")
    seeds = np.array([derive_seed(seed, "tree", t) for t in range(n_trees)], dtype=np.uint64)
    cap = 2 * len(y) + 1
    shape = (n_trees, cap)
    feat = np.full(shape, -1, dtype=np.int64)
    thr = np.zeros(shape)
    left = np.full(shape, -1, dtype=np.int64)
    right = np.full(shape, -1, dtype=np.int64)
    value = np.zeros(shape)
    n_nodes = np.zeros(n_trees, dtype=np.int64)
    _set_threads(workers)
    _grow_forest(X, y, int(mtry), seeds, int(min_leaf), feat, thr, left, right, value, n_nodes)
    width = int(n_nodes.max())
    return Forest(
        feat[:, :width].copy(), thr[:, :width].copy(), left[:, :width].copy(),
        right[:, :width].copy(), value[:, :width].copy(), n_nodes, int(mtry), int(seed),
        {"n_train": int(len(y)), "n_positive": int(y.sum()), "min_leaf": int(min_leaf)},
    )


def predict_proba(forest: Forest, X) -> np.ndarray:
    """Mean over trees of the class-1 fraction of the leaf each row reaches."""
    X = _as_matrix(X)
    return _predict(X, forest.feature, forest.threshold, forest.left, forest.right, forest.value)


def stratified_folds(y, folds: int, seed: int) -> np.ndarray:
    """Seeded fold id per row, classes dealt round-robin after shuffling."""
    y = np.asarray(y)
    rng = np.random.default_rng(derive_seed(seed, "folds"))
    fold = np.empty(len(y), dtype=np.int64)
    offset = 0
    for cls in (0, 1):
        idx = rng.permutation(np.flatnonzero(y == cls))
        fold[idx] = (offset + np.arange(len(idx))) % folds
        offset = (offset + len(idx)) % folds
    return fold


@dataclass(frozen=True)
class TuningResult:
    best_mtry: int
    mean_auc: dict  # mtry -> mean held-out fold AUC
    fold_auc: dict  # mtry -> list of per-fold AUCs (None where skipped)
    forest: Forest


def tune_mtry(
    X,
    y,
    candidates=range(1, N_FEATURES + 1),
    folds: int = 20,
    seed: int = 0,
    n_trees: int = 500,
    min_leaf: int = 1,
    workers: int | None = None,
) -> TuningResult:
    """Pick mtry by mean held-out AUC over stratified folds, then refit on everything.

    Folds whose held-out rows lack a class are skipped. Ties go to the smaller
    mtry.
    """
    X = _as_matrix(X)
    y = np.asarray(y, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise SingleClassTraining("training data must contain both ADR and non-ADR pairs")
    if len(y) < folds:
        raise TooFewRows(f"{len(y)} rows cannot fill {folds} folds")
    candidates = sorted({int(c) for c in candidates})
    for c in candidates:
        _check_mtry(c)
    fold = stratified_folds(y, folds, seed)
    fold_auc: dict[int, list] = {c: [] for c in candidates}
    for k in range(folds):
        test = fold == k
        train = ~test
        if len(np.unique(y[test])) < 2 or len(np.unique(y[train])) < 2:
            for c in candidates:
                fold_auc[c].append(None)
            continue
        for c in candidates:
            f = train_forest(X[train], y[train], c, n_trees, derive_seed(seed, "cv", k), min_leaf, workers)
            fold_auc[c].append(auc(predict_proba(f, X[test]), y[test]))
    mean_auc = {}
    for c in candidates:
        scored = [a for a in fold_auc[c] if a is not None]
        if not scored:
            raise TooFewRows("no fold holds out both classes")
        mean_auc[c] = float(np.mean(scored))
    best = max(candidates, key=lambda c: (mean_auc[c], -c))
    logger.info("mtry tuning: %s -> %d", {c: round(a, 4) for c, a in mean_auc.items()}, best)
    forest = train_forest(X, y, best, n_trees, derive_seed(seed, "final"), min_leaf, workers)
    forest.metadata.update(
        {
            "cv_folds": folds,
            "cv_mean_auc": {str(c): a for c, a in mean_auc.items()},
            "cv_fold_auc": fold_auc[best],
        }
    )
    return TuningResult(best, mean_auc, fold_auc, forest)


def save_forest(forest: Forest, path) -> None:
    """Versioned text format, one line per node; floats written with ``repr``."""
    with atomic_write(path) as fh:
        fh.write(FORMAT_HEADER + "\n")
        fh.write(f"mtry {forest.mtry}\n")
        fh.write(f"n_trees {forest.n_trees}\n")
        fh.write(f"seed {forest.seed}\n")
        fh.write(f"n_features {N_FEATURES}\n")
        fh.write("meta " + json.dumps(forest.metadata, sort_keys=True) + "\n")
        fh.write("# tree node split feature(1-based) threshold left right | tree node leaf fraction\n")
        for t in range(forest.n_trees):
            for k in range(int(forest.n_nodes[t])):
                if forest.left[t, k] < 0:
                    fh.write(f"{t} {k} leaf {float(forest.value[t, k])!r}\n")
                else:
                    fh.write(
                        f"{t} {k} split {int(forest.feature[t, k]) + 1} {float(forest.threshold[t, k])!r} "
                        f"{int(forest.left[t, k])} {int(forest.right[t, k])}\n"
                    )


def load_forest(path) -> Forest:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != FORMAT_HEADER:
        raise EssdError(f"{path}: not an essd forest file (expected header {FORMAT_HEADER!r})")
    head = {}
    body = []
    for line in lines[1:]:
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        if key in ("mtry", "n_trees", "seed", "n_features", "meta"):
            head[key] = rest
        else:
            body.append(line.split())
    n_trees = int(head["n_trees"])
    nodes: list[list] = [[] for _ in range(n_trees)]
    for parts in body:
        t, k = int(parts[0]), int(parts[1])
        if k != len(nodes[t]):
            raise EssdError(f"{path}: nodes of tree {t} out of order")
        nodes[t].append(parts[2:])
    trees = []
    for t in range(n_trees):
        recs = nodes[t]
        feat = np.full(len(recs), -1, dtype=np.int64)
        thr = np.zeros(len(recs))
        left = np.full(len(recs), -1, dtype=np.int64)
        right = np.full(len(recs), -1, dtype=np.int64)
        value = np.zeros(len(recs))
        for k, rec in enumerate(recs):
            if rec[0] == "leaf":
                value[k] = float(rec[1])
            else:
                feat[k] = int(rec[1]) - 1
                thr[k] = float(rec[2])
                left[k], right[k] = int(rec[3]), int(rec[4])
        trees.append(DecisionTree(feat, thr, left, right, value))
    return Forest.from_trees(trees, int(head["mtry"]), int(head["seed"]), json.loads(head.get("meta", "{}")))
