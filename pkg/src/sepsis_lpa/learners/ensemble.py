"""Random forests and gradient boosted trees for binary outcomes."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit

from .tree import Tree, grow_tree, presort, resample_order

logger = logging.getLogger(__name__)

GBM_DEFAULTS = {"n_trees": 100, "interaction_depth": 2, "learning_rate": 0.1, "min_node_obs": 10}
RF_DEFAULTS = {"n_trees": 300, "mtry": None, "min_node_obs": 1, "bootstrap": True}
MAX_HALVINGS = 50
MAX_LEAF_STEP = 25.0


class ConfigError(ValueError):
    pass


def _check_target(y) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError("y must be one-dimensional")
    uniq = np.unique(y)
    if not np.all(np.isin(uniq, (0, 1))):
        raise ValueError("y must be binary 0/1")
    if uniq.size < 2:
        raise ValueError("degenerate target: only one class present")
    return y.astype(float)


def _deviance(y, F) -> np.ndarray:
    """Per-row binomial deviance -2 [y F - log(1 + e^F)]."""
    return 2.0 * (np.logaddexp(0.0, F) - y * F)


@dataclass
class TrainedEnsemble:
    kind: str                        # "rf" or "gbm"
    trees: list
    params: dict
    feature_names: list
    seed: int
    init: float = 0.0                # gbm: initial log-odds
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def _check_X(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise ValueError(f"expected {len(self.feature_names)} feature columns")
        if np.isnan(X).any():
            raise ValueError("X contains missing values; impute first")
        return X

    def staged_predict_proba(self, X, stages) -> np.ndarray:
        """Positive-class probabilities using the first ``t`` trees, one row per t in ``stages``."""
        X = self._check_X(X)
        stages = [int(s) for s in stages]
        if any(s < 0 or s > self.n_trees for s in stages):
            raise ValueError(f"stages must lie in 0..{self.n_trees}")
        out = np.empty((len(stages), X.shape[0]))
        acc = np.zeros(X.shape[0])
        want = {s: [i for i, t in enumerate(stages) if t == s] for s in set(stages)}
        for t in range(self.n_trees + 1):
            if t in want:
                if self.kind == "gbm":
                    p = expit(self.init + self.params["learning_rate"] * acc)
                else:
                    p = acc / t if t else np.full(X.shape[0], 0.5)
                for i in want[t]:
                    out[i] = p
            if t == self.n_trees or t >= max(stages):
                break
            leaf = self.trees[t].predict(X)
            acc += leaf if self.kind == "gbm" else (leaf > 0.5)
        return out

    def predict_proba(self, X, n_trees: int | None = None) -> np.ndarray:
        return self.staged_predict_proba(X, [self.n_trees if n_trees is None else n_trees])[0]

    def truncated(self, n_trees: int) -> "TrainedEnsemble":
        """The model formed by the first ``n_trees`` trees (valid for both kinds)."""
        params = dict(self.params, n_trees=n_trees)
        return TrainedEnsemble(self.kind, self.trees[:n_trees], params, self.feature_names, self.seed,
                               self.init, dict(self.diagnostics))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "params": self.params, "feature_names": list(self.feature_names),
            "seed": self.seed, "init": self.init, "diagnostics": self.diagnostics,
            "trees": [t.to_dict(self.feature_names) for t in self.trees],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainedEnsemble":
        return cls(raw["kind"], [Tree.from_dict(t) for t in raw["trees"]], raw["params"],
                   list(raw["feature_names"]), raw["seed"], raw.get("init", 0.0),
                   raw.get("diagnostics", {}))


def _names(X, feature_names):
    if feature_names is None:
        return [f"x{j}" for j in range(X.shape[1])]
    if len(feature_names) != X.shape[1]:
        raise ValueError("feature_names length does not match X")
    return list(feature_names)


def fit_rf(X, y, params: dict | None = None, seed: int = 0, feature_names=None) -> TrainedEnsemble:
    """Random forest of unpruned Gini trees on bootstrap samples.

    Each tree casts a 0/1 vote (leaf class fraction above one half), and the
    predicted probability is the mean vote. Tree t depends only on ``(seed, t)``,
    so the first t trees of a larger forest form the t-tree forest.
    """
    p = dict(RF_DEFAULTS, **(params or {}))
    X = np.ascontiguousarray(X, dtype=float)
    y = _check_target(y)
    n, d = X.shape
    if p["n_trees"] < 1:
        raise ConfigError("rf n_trees must be at least 1")
    mtry = int(np.floor(np.sqrt(d))) if p["mtry"] is None else int(p["mtry"])
    if not 1 <= mtry <= d:
        raise ConfigError(f"mtry must lie in 1..{d}")
    p["mtry"] = mtry
    order = presort(X)
    trees = []
    for t in range(int(p["n_trees"])):
        rng = np.random.default_rng([seed, t])
        tree_seed = int(rng.integers(2**32))
        if p["bootstrap"]:
            counts = np.bincount(rng.integers(0, n, n), minlength=n)
            Xb, yb = np.repeat(X, counts, axis=0), np.repeat(y, counts)
            ob = resample_order(order, counts)
        else:
            Xb, yb, ob = X, y, order
        tree, _ = grow_tree(Xb, yb, max_depth=None, min_leaf=int(p["min_node_obs"]), mtry=mtry,
                            seed=tree_seed, order=ob)
        # Gini decrease of a split is twice its sum-of-squares reduction on 0/1 targets
        tree.improvement = 2.0 * tree.improvement
        trees.append(tree)
    return TrainedEnsemble("rf", trees, p, _names(X, feature_names), seed)


def fit_gbm(X, y, params: dict | None = None, seed: int = 0, feature_names=None) -> TrainedEnsemble:
    """Gradient boosting on the binomial deviance.

    Each stage fits a least-squares tree of depth ``interaction_depth`` to the
    residual y - p, sets leaf values by one Newton step sum(r) / sum(p(1-p)),
    and halves any leaf step that would raise that leaf's deviance, so training
    deviance never increases. No row subsampling, so the fit is deterministic.
    """
    p = dict(GBM_DEFAULTS, **(params or {}))
    lr = float(p["learning_rate"])
    if not 0.0 < lr <= 1.0:
        raise ConfigError(f"learning_rate must lie in (0, 1], got {lr}")
    if int(p["n_trees"]) < 0 or int(p["interaction_depth"]) < 1 or int(p["min_node_obs"]) < 1:
        raise ConfigError("n_trees >= 0, interaction_depth >= 1 and min_node_obs >= 1 required")
    X = np.ascontiguousarray(X, dtype=float)
    y = _check_target(y)
    base = y.mean()
    init = float(np.log(base / (1.0 - base)))
    F = np.full(y.size, init)
    order = presort(X)
    trees, trace = [], [float(_deviance(y, F).sum())]
    for t in range(int(p["n_trees"])):
        prob = expit(F)
        r = y - prob
        tree, leaf_of = grow_tree(X, r, max_depth=int(p["interaction_depth"]),
                                  min_leaf=int(p["min_node_obs"]), order=order)
        K = tree.feature.size
        num = np.bincount(leaf_of, weights=r, minlength=K)
        den = np.bincount(leaf_of, weights=prob * (1.0 - prob), minlength=K)
        with np.errstate(divide="ignore", invalid="ignore"):
            gamma = np.where(den > 1e-12, num / den, 0.0)
        gamma = np.clip(gamma, -MAX_LEAF_STEP, MAX_LEAF_STEP)
        dev0 = np.bincount(leaf_of, weights=_deviance(y, F), minlength=K)
        for _ in range(MAX_HALVINGS):
            dev1 = np.bincount(leaf_of, weights=_deviance(y, F + lr * gamma[leaf_of]), minlength=K)
            bad = dev1 > dev0
            if not bad.any():
                break
            gamma[bad] *= 0.5
        else:
            gamma[bad] = 0.0
        leaves = tree.feature == -1
        tree.value = np.where(leaves, gamma, 0.0)
        F = F + lr * gamma[leaf_of]
        trees.append(tree)
        trace.append(float(_deviance(y, F).sum()))
    return TrainedEnsemble("gbm", trees, p, _names(X, feature_names), seed, init,
                           {"train_deviance": trace})


@dataclass
class ImportanceTable:
    table: pd.DataFrame  # rank, variable, score, raw

    def to_csv(self, path) -> None:
        self.table[["rank", "variable", "score"]].to_csv(path, index=False, float_format="%.2f")

    def top(self, k: int = 10) -> pd.DataFrame:
        return self.table.head(k)


def variable_importance(model: TrainedEnsemble) -> ImportanceTable:
    """Total split improvement per feature over all trees, scaled so the maximum is 100.

    GBM credits the squared-error reduction of each split on the deviance
    gradient; RF credits the Gini decrease (node size weighted).
    """
    d = len(model.feature_names)
    raw = np.zeros(d)
    for tree in model.trees:
        inner = tree.feature >= 0
        raw += np.bincount(tree.feature[inner], weights=tree.improvement[inner], minlength=d)
    top = raw.max()
    if top <= 0:
        logger.warning("model has no splits; all importances are zero")
        score = np.zeros(d)
    else:
        score = 100.0 * raw / top
    df = pd.DataFrame({"variable": model.feature_names, "score": score, "raw": raw})
    df = df.sort_values(["score", "variable"], ascending=[False, True], kind="stable").reset_index(drop=True)
    df.insert(0, "rank", np.arange(1, d + 1))
    return ImportanceTable(df)
