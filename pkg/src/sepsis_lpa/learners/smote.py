"""SMOTE: synthetic minority oversampling by interpolation toward nearest minority neighbours."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SmoteConfig:
    k_neighbors: int = 5
    amount: float | None = None  # synthetic samples per minority sample; None -> balance target
    target_ratio: float = 0.5    # minority / majority after oversampling when amount is None
    seed: int = 0

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be at least 1")
        if self.amount is not None and self.amount < 0:
            raise ValueError("amount must be nonnegative")
        if not 0 < self.target_ratio <= 1:
            raise ValueError("target_ratio must lie in (0, 1]")


@dataclass
class SmoteResult:
    samples: np.ndarray          # synthetic points (s x d)
    source_index: np.ndarray     # minority row each point was grown from
    neighbor_index: np.ndarray   # minority row of the chosen neighbour
    gap: np.ndarray              # interpolation weight u in [0, 1)
    k_used: int


def smote(minority, config: SmoteConfig = SmoteConfig(), n_synthetic: int | None = None) -> SmoteResult:
    """Draw ``m * amount`` synthetic points (or ``n_synthetic`` if given).

    Each point is ``x_i + u (x_nn - x_i)`` with ``x_nn`` drawn uniformly from the
    k nearest minority neighbours of ``x_i`` (self excluded) and ``u ~ U(0, 1)``.
    Source rows cycle through the minority set so every point seeds the same
    number of synthetics, up to one.
    """
    P = np.asarray(minority, dtype=float)
    if P.ndim != 2:
        raise ValueError("minority must be a 2-D array")
    m, d = P.shape
    if m < 2:
        raise ValueError("insufficient minority samples for SMOTE (need at least 2)")
    k = config.k_neighbors
    if k > m - 1:
        logger.warning("k_neighbors=%d reduced to %d (minority size %d)", k, m - 1, m)
        k = m - 1
    if n_synthetic is None:
        n_synthetic = int(round(m * (config.amount or 0.0)))
    rng = np.random.default_rng(config.seed)
    if n_synthetic <= 0:
        empty = np.empty(0, dtype=np.int64)
        return SmoteResult(np.empty((0, d)), empty, empty, np.empty(0), k)

    # k+1 nearest includes the point itself; order by distance then index
    _, nn = cKDTree(P).query(P, k=min(k + 1, m))
    nn = np.atleast_2d(nn).reshape(m, -1)
    neighbours = np.empty((m, k), dtype=np.int64)
    for i in range(m):
        # exact duplicates of x_i may displace it from its own list
        neighbours[i] = [j for j in nn[i] if j != i][:k]

    reps = math.ceil(n_synthetic / m)
    src = np.tile(np.arange(m), reps)[:n_synthetic]
    src = np.sort(src, kind="stable")
    pick = rng.integers(0, k, size=n_synthetic)
    nbr = neighbours[src, pick]
    gap = rng.random(n_synthetic)
    samples = P[src] + gap[:, None] * (P[nbr] - P[src])
    return SmoteResult(samples, src, nbr, gap, k)


def balance_amount(n_minority: int, n_majority: int, target_ratio: float = 0.5) -> int:
    """Synthetic count lifting the minority to ``target_ratio`` of the majority (never negative)."""
    return max(int(round(target_ratio * n_majority)) - n_minority, 0)


def oversample(X, y, config: SmoteConfig = SmoteConfig()):
    """Append SMOTE samples for the positive class of binary ``y``.

    Returns ``(X_aug, y_aug, result)``; original rows come first, unchanged.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y).astype(int)
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if config.amount is None:
        n_syn = balance_amount(pos.size, neg.size, config.target_ratio)
    else:
        n_syn = int(round(pos.size * config.amount))
    res = smote(X[pos], config, n_synthetic=n_syn)
    res.source_index = pos[res.source_index]
    res.neighbor_index = pos[res.neighbor_index]
    X_aug = np.vstack([X, res.samples])
    y_aug = np.concatenate([y, np.ones(res.samples.shape[0], dtype=int)])
    return X_aug, y_aug, res
