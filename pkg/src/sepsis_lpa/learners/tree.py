"""Binary CART trees on numeric features, grown with a presorted index layout.

Splits maximise the reduction in within-node sum of squares of the target. For
a 0/1 target that reduction is exactly half the weighted Gini decrease, so the
same builder serves random-forest classification trees and the least-squares
gradient trees of boosting.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

LEAF = -1
# relative margin a later candidate must beat to replace the current best split;
# keeps the lower feature index / lower threshold on floating-point ties
GAIN_RTOL = 1e-12


@numba.njit(cache=True)
def _presort(X):
    n, d = X.shape
    order = np.empty((d, n), dtype=np.int64)
    for f in range(d):
        order[f] = np.argsort(X[:, f], kind="mergesort")
    return order


@numba.njit(cache=True)
def _expand_order(order, counts):
    """Sorted layout of a resample holding ``counts[r]`` copies of row r, laid out
    contiguously in row order, derived from the full-data presort."""
    d, n = order.shape
    start = np.zeros(n, dtype=np.int64)
    acc = 0
    for r in range(n):
        start[r] = acc
        acc += counts[r]
    out = np.empty((d, acc), dtype=np.int64)
    for f in range(d):
        k = 0
        for i in range(n):
            r = order[f, i]
            for c in range(counts[r]):
                out[f, k] = start[r] + c
                k += 1
    return out


@numba.njit(cache=True)
def _grow(Xs, ys, order, max_depth, min_leaf, mtry, seed):
    m, d = Xs.shape
    cap = 2 * m + 1
    feat = np.full(cap, LEAF, dtype=np.int64)
    thr = np.zeros(cap)
    left = np.full(cap, LEAF, dtype=np.int64)
    right = np.full(cap, LEAF, dtype=np.int64)
    value = np.zeros(cap)
    count = np.zeros(cap, dtype=np.int64)
    gain = np.zeros(cap)
    leaf_of = np.empty(m, dtype=np.int64)
    goes_left = np.zeros(m, dtype=np.bool_)
    buf = np.empty(m, dtype=np.int64)
    feats = np.arange(d)
    np.random.seed(seed)

    st_node = np.empty(cap, dtype=np.int64)
    st_lo = np.empty(cap, dtype=np.int64)
    st_hi = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    top = 0
    st_node[0], st_lo[0], st_hi[0], st_depth[0] = 0, 0, m, 0
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node, lo, hi, depth = st_node[top], st_lo[top], st_hi[top], st_depth[top]
        n = hi - lo
        S = 0.0
        SS = 0.0
        for i in range(lo, hi):
            v = ys[order[0, i]]
            S += v
            SS += v * v
        value[node] = S / n
        count[node] = n
        sse = SS - S * S / n
        can_split = n >= 2 * min_leaf and (max_depth < 0 or depth < max_depth) and sse > 1e-14 * max(SS, 1.0)
        best_f = -1
        best_gain = 0.0
        best_thr = 0.0
        best_nl = 0
        if can_split:
            # random feature order; the first mtry are candidates, the rest are
            # searched only when none of those admits a valid split
            if mtry < d:
                for i in range(d):
                    j = i + np.random.randint(d - i)
                    t = feats[i]
                    feats[i] = feats[j]
                    feats[j] = t
            base = S * S / n
            start = 0
            while start < d and best_f < 0:
                stop = d if mtry >= d else min(start + mtry, d)
                cand = np.sort(feats[start:stop]) if mtry < d else feats[start:stop]
                for f in cand:
                    SL = 0.0
                    for i in range(lo, hi - 1):
                        r = order[f, i]
                        SL += ys[r]
                        nl = i - lo + 1
                        if nl < min_leaf:
                            continue
                        if n - nl < min_leaf:
                            break
                        x0 = Xs[r, f]
                        x1 = Xs[order[f, i + 1], f]
                        if x1 <= x0:
                            continue
                        SR = S - SL
                        g = SL * SL / nl + SR * SR / (n - nl) - base
                        if g > best_gain * (1.0 + GAIN_RTOL) and g > 1e-14 * max(sse, 1e-300):
                            best_gain = g
                            best_f = f
                            mid = 0.5 * (x0 + x1)
                            best_thr = mid if mid < x1 else x0
                            best_nl = nl
                start = stop
        if best_f < 0:
            for i in range(lo, hi):
                leaf_of[order[0, i]] = node
            continue
        feat[node] = best_f
        thr[node] = best_thr
        gain[node] = best_gain
        for i in range(lo, hi):
            goes_left[order[best_f, i]] = i < lo + best_nl
        for f in range(d):
            a = lo
            b = 0
            for i in range(lo, hi):
                r = order[f, i]
                if goes_left[r]:
                    order[f, a] = r
                    a += 1
                else:
                    buf[b] = r
                    b += 1
            for i in range(b):
                order[f, a + i] = buf[i]
        lc, rc = n_nodes, n_nodes + 1
        n_nodes += 2
        left[node], right[node] = lc, rc
        mid_i = lo + best_nl
        st_node[top], st_lo[top], st_hi[top], st_depth[top] = rc, mid_i, hi, depth + 1
        top += 1
        st_node[top], st_lo[top], st_hi[top], st_depth[top] = lc, lo, mid_i, depth + 1
        top += 1
    return (feat[:n_nodes], thr[:n_nodes], left[:n_nodes], right[:n_nodes],
            value[:n_nodes], count[:n_nodes], gain[:n_nodes], leaf_of)


@numba.njit(cache=True)
def _apply(X, feat, thr, left, right):
    out = np.empty(X.shape[0], dtype=np.int64)
    for i in range(X.shape[0]):
        k = 0
        while feat[k] != LEAF:
            k = left[k] if X[i, feat[k]] <= thr[k] else right[k]
        out[i] = k
    return out


@dataclass
class Tree:
    """Array-encoded binary tree; node 0 is the root, ``feature == -1`` marks leaves."""
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_node: np.ndarray
    improvement: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature == LEAF))

    def apply(self, X) -> np.ndarray:
        """Leaf node index reached by every row of ``X``."""
        X = np.ascontiguousarray(X, dtype=float)
        return _apply(X, self.feature, self.threshold, self.left, self.right)

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def depth(self) -> int:
        depths = np.zeros(self.feature.size, dtype=int)
        for k in range(self.feature.size):
            if self.feature[k] != LEAF:
                depths[self.left[k]] = depths[self.right[k]] = depths[k] + 1
        return int(depths.max())

    def to_dict(self, feature_names=None, k: int = 0) -> dict:
        """Nested-node representation for JSON export."""
        if self.feature[k] == LEAF:
            return {"leaf": True, "value": float(self.value[k]), "n": int(self.n_node[k])}
        f = int(self.feature[k])
        return {
            "feature": feature_names[f] if feature_names is not None else f,
            "feature_index": f,
            "threshold": float(self.threshold[k]),
            "improvement": float(self.improvement[k]),
            "n": int(self.n_node[k]),
            "left": self.to_dict(feature_names, int(self.left[k])),
            "right": self.to_dict(feature_names, int(self.right[k])),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "Tree":
        feature, thr, left, right, value, n_node, imp = [], [], [], [], [], [], []

        def visit(node):
            k = len(feature)
            feature.append(LEAF)
            for arr in (thr, value, imp):
                arr.append(0.0)
            left.append(LEAF)
            right.append(LEAF)
            n_node.append(int(node.get("n", 0)))
            if node.get("leaf"):
                value[k] = node["value"]
                return k
            feature[k] = node["feature_index"]
            thr[k] = node["threshold"]
            imp[k] = node.get("improvement", 0.0)
            left[k] = visit(node["left"])
            right[k] = visit(node["right"])
            return k

        visit(raw)
        return cls(np.array(feature, dtype=np.int64), np.array(thr), np.array(left, dtype=np.int64),
                   np.array(right, dtype=np.int64), np.array(value), np.array(n_node, dtype=np.int64),
                   np.array(imp))


def presort(X) -> np.ndarray:
    """Per-feature stable sort order of the rows of ``X`` (d x n)."""
    return _presort(np.ascontiguousarray(X, dtype=float))


def resample_order(order: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Presort of ``np.repeat(X, counts, axis=0)`` computed from the presort of ``X``."""
    return _expand_order(order, np.asarray(counts, dtype=np.int64))


def grow_tree(X, y, max_depth: int | None = None, min_leaf: int = 1, mtry: int | None = None,
              seed: int = 0, order: np.ndarray | None = None):
    """Grow one tree on rows of ``X`` with real target ``y``.

    ``max_depth=None`` grows until leaves are pure or hit ``min_leaf``. ``mtry``
    features are drawn per node (all when None). ``order`` is an optional
    precomputed :func:`presort` of ``X``, reused across boosting stages.
    Returns ``(tree, leaf_of_row)``.
    """
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be n x d with one target per row")
    if X.shape[0] == 0:
        raise ValueError("cannot grow a tree on zero rows")
    d = X.shape[1]
    mtry = d if mtry is None else int(min(max(mtry, 1), d))
    order = _presort(X) if order is None else np.array(order, dtype=np.int64, order="C")
    out = _grow(X, y, order, -1 if max_depth is None else int(max_depth), int(max(min_leaf, 1)),
                mtry, int(seed) % (2**32))
    return Tree(*out[:7]), out[7]
