"""Stratified splitting and cross-validated hyperparameter search with in-fold SMOTE."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from ..evalstats import auc, youden_threshold
from .ensemble import fit_gbm, fit_rf
from .smote import SmoteConfig, oversample

logger = logging.getLogger(__name__)

GBM_GRID = {"n_trees": [100, 300, 500], "interaction_depth": [1, 2, 3],
            "learning_rate": [0.01, 0.1], "min_node_obs": [5, 10]}
RF_GRID = {"n_trees": [100, 300, 500]}
FITTERS = {"gbm": fit_gbm, "rf": fit_rf}


def train_test_split(y, test_frac: float = 0.30, strata=None, seed: int = 0):
    """Stratified split returning sorted ``(train_idx, test_idx)``.

    ``strata`` defaults to ``y``; each stratum sends ``round(test_frac * size)``
    of its rows to the test side.
    """
    y = np.asarray(y)
    strata = y if strata is None else np.asarray(strata)
    if strata.shape[0] != y.shape[0]:
        raise ValueError("strata must have one entry per row")
    if not 0.0 < test_frac < 1.0:
        raise ValueError("test_frac must lie in (0, 1)")
    if np.unique(y).size < 2:
        raise ValueError("both classes must be present")
    rng = np.random.default_rng(seed)
    test = []
    for s in np.unique(strata):
        idx = np.flatnonzero(strata == s)
        if idx.size < 2:
            raise ValueError(f"stratum {s!r} has fewer than 2 members")
        k = int(round(test_frac * idx.size))
        test.append(rng.permutation(idx)[:k])
    test = np.sort(np.concatenate(test))
    train = np.setdiff1d(np.arange(y.size), test)
    return train, test


def stratified_folds(y, folds: int = 5, seed: int = 0) -> np.ndarray:
    """Fold id per row; each class is shuffled and dealt round-robin."""
    y = np.asarray(y).astype(int)
    counts = np.bincount(y, minlength=2)
    if counts.min() < folds:
        raise ValueError(f"cannot form {folds} stratified folds: smallest class has {counts.min()} rows")
    rng = np.random.default_rng(seed)
    fold = np.empty(y.size, dtype=int)
    for c in (0, 1):
        idx = rng.permutation(np.flatnonzero(y == c))
        fold[idx] = np.arange(idx.size) % folds
    return fold


def expand_grid(grid) -> list:
    """A dict of value lists becomes the list of its combinations; a list passes through."""
    if isinstance(grid, dict):
        keys = list(grid)
        return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]
    points = [dict(p) for p in grid]
    if not points:
        raise ValueError("grid is empty")
    return points


@dataclass
class CVResult:
    best_params: dict
    table: pd.DataFrame       # one row per grid point: params, mean_auc, sd_auc, fold_1..k
    oof_scores: np.ndarray    # out-of-fold scores of the best setting
    threshold: float          # Youden cut-off on the out-of-fold scores
    kind: str

    @property
    def best_auc(self) -> float:
        return float(self.table.loc[self.table["best"], "mean_auc"].iloc[0])


def cv_tune(X, y, kind: str = "gbm", grid=None, folds: int = 5, seed: int = 0,
            smote: SmoteConfig | None = SmoteConfig()) -> CVResult:
    """Pick hyperparameters by mean validation AUC over stratified folds.

    SMOTE (when configured) is applied to the training part of each fold only.
    Grid points differing only in ``n_trees`` are scored from a single fit with
    staged predictions. Ties go to fewer trees, then shallower trees.
    """
    if kind not in FITTERS:
        raise ValueError(f"unknown learner {kind!r}")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y).astype(int)
    points = expand_grid(grid if grid is not None else (GBM_GRID if kind == "gbm" else RF_GRID))
    fold = stratified_folds(y, folds, seed)
    groups: dict = {}
    for i, p in enumerate(points):
        key = tuple(sorted((k, v) for k, v in p.items() if k != "n_trees"))
        groups.setdefault(key, []).append(i)
    scores = np.full((len(points), folds), np.nan)
    oof = np.full((len(points), y.size), np.nan)
    for f in range(folds):
        tr, va = np.flatnonzero(fold != f), np.flatnonzero(fold == f)
        Xtr, ytr = X[tr], y[tr]
        if smote is not None:
            cfg = SmoteConfig(smote.k_neighbors, smote.amount, smote.target_ratio,
                              int(np.random.SeedSequence([seed, f]).generate_state(1)[0]))
            Xtr, ytr, _ = oversample(Xtr, ytr, cfg)
        for key, members in groups.items():
            stages = [int(points[i].get("n_trees", 100)) for i in members]
            params = dict(points[members[0]], n_trees=max(stages))
            model = FITTERS[kind](Xtr, ytr, params, seed=seed)
            staged = model.staged_predict_proba(X[va], stages)
            for row, i in enumerate(members):
                scores[i, f] = auc(staged[row], y[va])
                oof[i, va] = staged[row]
    table = pd.DataFrame(points)
    table["mean_auc"] = scores.mean(axis=1)
    table["sd_auc"] = scores.std(axis=1, ddof=1) if folds > 1 else 0.0
    for f in range(folds):
        table[f"fold_{f + 1}"] = scores[:, f]
    top = table["mean_auc"].max()
    tied = table.index[table["mean_auc"] >= top - 1e-12]
    size_key = [(points[i].get("n_trees", 0), points[i].get("interaction_depth", 0), i) for i in tied]
    best = min(size_key)[2]
    table["best"] = table.index == best
    threshold = youden_threshold(oof[best], y)
    logger.info("%s CV best %s (mean AUC %.4f)", kind, points[best], table.loc[best, "mean_auc"])
    return CVResult(points[best], table, oof[best], threshold, kind)
