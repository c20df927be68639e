import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from sepsis_lpa.evalstats import auc
from sepsis_lpa.learners import (ConfigError, SmoteConfig, TrainedEnsemble, balance_amount, cv_tune,
                                 expand_grid, fit_gbm, fit_rf, grow_tree, oversample, smote,
                                 stratified_folds, train_test_split, variable_importance)


def separable(n=400, d=4, seed=0):
    r = np.random.default_rng(seed)
    X = r.normal(0, 1, (n, d))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0.3).astype(int)
    return X, y


def knn_sets(P, k):
    """Brute-force k nearest neighbours (self excluded) with the k-th distance, for tie tolerance."""
    D = np.sqrt(((P[:, None, :] - P[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(D, np.inf)
    kth = np.sort(D, axis=1)[:, k - 1]
    return D, kth


# ------------------------------------------------------------------ SMOTE

@pytest.mark.parametrize("seed", range(5))
def test_smote_points_on_segment_to_a_knn(seed):
    r = np.random.default_rng(seed)
    P = r.normal(0, 1, (40, 3))
    P[5] = P[6]  # an exact duplicate pair
    res = smote(P, SmoteConfig(k_neighbors=5, seed=seed), n_synthetic=200)
    D, kth = knn_sets(P, 5)
    for s, i, j, u in zip(res.samples, res.source_index, res.neighbor_index, res.gap):
        assert i != j and 0.0 <= u < 1.0
        assert D[i, j] <= kth[i] + 1e-12  # neighbour is among the 5 nearest
        assert np.array_equal(s, P[i] + u * (P[j] - P[i]))
        # collinear and between the endpoints, checked without the stored gap
        seg = P[j] - P[i]
        if np.any(seg != 0):
            t = np.dot(s - P[i], seg) / np.dot(seg, seg)
            assert -1e-12 <= t <= 1 + 1e-12
            assert np.allclose(P[i] + t * seg, s, atol=1e-12)
        else:
            assert np.array_equal(s, P[i])


def test_smote_two_point_example():
    P = np.array([[0.0, 0.0], [1.0, 1.0]])
    res = smote(P, SmoteConfig(k_neighbors=1, seed=0), n_synthetic=4)
    assert set(res.neighbor_index) == {0, 1}
    for s, i, u in zip(res.samples, res.source_index, res.gap):
        expected = u if i == 0 else 1 - u
        assert s == pytest.approx([expected, expected], abs=1e-15)
    # the u = 0.4 worked example from a source at the origin
    assert np.array_equal(P[0] + 0.4 * (P[1] - P[0]), np.array([0.4, 0.4]))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 30), st.integers(1, 4), st.integers(0, 10_000))
def test_smote_stays_in_bounding_box(m, d, seed):
    P = np.random.default_rng(seed).uniform(-5, 5, (m, d))
    res = smote(P, SmoteConfig(k_neighbors=3, seed=seed), n_synthetic=3 * m)
    assert res.samples.shape == (3 * m, d)
    assert np.all(res.samples >= P.min(axis=0) - 1e-12) and np.all(res.samples <= P.max(axis=0) + 1e-12)


def test_smote_needs_two_points():
    with pytest.raises(ValueError, match="insufficient minority samples"):
        smote(np.zeros((1, 3)), SmoteConfig(), n_synthetic=5)


def test_smote_reduces_k_with_warning(caplog):
    res = smote(np.arange(6.0).reshape(3, 2), SmoteConfig(k_neighbors=5), n_synthetic=6)
    assert res.k_used == 2
    assert "reduced to 2" in caplog.text


def test_smote_sources_balanced_and_deterministic():
    P = np.random.default_rng(1).normal(size=(7, 2))
    a = smote(P, SmoteConfig(seed=3), n_synthetic=30)
    b = smote(P, SmoteConfig(seed=3), n_synthetic=30)
    assert np.array_equal(a.samples, b.samples)
    counts = np.bincount(a.source_index, minlength=7)
    assert counts.max() - counts.min() <= 1


def test_oversample_balances_to_target_ratio():
    X, y = separable(300)
    y[:] = 0
    y[:20] = 1
    Xa, ya, res = oversample(X, y, SmoteConfig(seed=0))
    assert np.array_equal(Xa[:300], X) and np.array_equal(ya[:300], y)
    assert ya.sum() == round(0.5 * 280)
    assert balance_amount(20, 280) == 120
    assert set(res.source_index) <= set(range(20))


def test_smote_config_validation():
    with pytest.raises(ValueError):
        SmoteConfig(k_neighbors=0)
    with pytest.raises(ValueError):
        SmoteConfig(target_ratio=0.0)


# ------------------------------------------------------------------ splits

def test_split_example():
    y = np.zeros(100, dtype=int)
    y[::10] = 1
    tr, te = train_test_split(y, 0.30, seed=4)
    assert te.size == 30 and y[te].sum() == 3
    assert np.array_equal(np.sort(np.concatenate([tr, te])), np.arange(100))
    tr2, te2 = train_test_split(y, 0.30, seed=4)
    assert np.array_equal(te, te2)


@settings(max_examples=40, deadline=None)
@given(st.integers(20, 300), st.integers(2, 6), st.integers(0, 1000))
def test_split_partitions_every_stratum(n, k, seed):
    r = np.random.default_rng(seed)
    strata = np.concatenate([np.arange(k).repeat(2), r.integers(0, k, n)])
    y = (strata == 0).astype(int)
    tr, te = train_test_split(y, 0.3, strata=strata, seed=seed)
    assert np.intersect1d(tr, te).size == 0 and tr.size + te.size == y.size
    for s in range(k):
        size = np.sum(strata == s)
        assert np.sum(strata[te] == s) == round(0.3 * size)


def test_split_rejects_singleton_stratum():
    with pytest.raises(ValueError, match="fewer than 2"):
        train_test_split(np.array([0, 0, 1, 1, 1]), strata=np.array([0, 0, 1, 1, 2]))


def test_stratified_folds_balanced():
    y = np.r_[np.zeros(50, int), np.ones(11, int)]
    f = stratified_folds(y, 5, seed=2)
    for c in (0, 1):
        counts = np.bincount(f[y == c], minlength=5)
        assert counts.max() - counts.min() <= 1


# ------------------------------------------------------------------ trees

def test_tree_memorises_distinct_rows():
    r = np.random.default_rng(0)
    X = r.normal(size=(200, 3))
    y = r.integers(0, 2, 200).astype(float)
    tree, leaf_of = grow_tree(X, y)
    assert np.array_equal(tree.predict(X), y)
    assert np.array_equal(tree.apply(X), leaf_of)


def test_tree_depth_limit():
    X, y = separable(300)
    tree, _ = grow_tree(X, y.astype(float), max_depth=2)
    assert tree.depth() <= 2 and tree.n_leaves <= 4


# ------------------------------------------------------------------ random forest

def test_rf_separable_auc():
    X, y = separable(600, seed=1)
    Xt, yt = separable(400, seed=2)
    m = fit_rf(X, y, {"n_trees": 100}, seed=0)
    assert auc(m.predict_proba(Xt), yt) >= 0.99


def test_rf_single_tree_without_bootstrap_memorises():
    r = np.random.default_rng(3)
    X = r.normal(size=(150, 4))
    y = r.integers(0, 2, 150)
    m = fit_rf(X, y, {"n_trees": 1, "bootstrap": False, "mtry": 4})
    assert np.array_equal(m.predict_proba(X), y.astype(float))


def test_rf_probabilities_are_vote_fractions():
    X, y = separable(200)
    m = fit_rf(X, y, {"n_trees": 7}, seed=5)
    p = m.predict_proba(separable(100, seed=9)[0]) * 7
    assert np.allclose(p, np.round(p), atol=1e-12)


def test_rf_prefix_property_and_determinism():
    X, y = separable(200)
    big = fit_rf(X, y, {"n_trees": 20}, seed=4)
    small = fit_rf(X, y, {"n_trees": 8}, seed=4)
    Xt = separable(50, seed=3)[0]
    assert np.array_equal(big.predict_proba(Xt, n_trees=8), small.predict_proba(Xt))
    assert np.array_equal(big.truncated(8).predict_proba(Xt), small.predict_proba(Xt))


def test_rf_permuted_labels_auc_near_half():
    r = np.random.default_rng(7)
    X = r.normal(size=(2000, 5))
    y = r.permutation(np.r_[np.ones(1000, int), np.zeros(1000, int)])
    res = cv_tune(X, y, "rf", {"n_trees": [100], "mtry": [2]}, folds=5, seed=0, smote=None)
    assert 0.45 <= res.best_auc <= 0.55


def test_rf_mtry_validated():
    X, y = separable(50)
    with pytest.raises(ConfigError):
        fit_rf(X, y, {"mtry": 9})


# ------------------------------------------------------------------ boosting

def best_stump_oracle(X, y):
    """Exhaustive least-squares stump on the first-stage residual, then the Newton leaf step."""
    p0 = y.mean()
    r = y - p0
    best = (-np.inf, None, None)
    for f in range(X.shape[1]):
        xs = np.unique(X[:, f])
        for a, b in zip(xs, xs[1:]):
            t = 0.5 * (a + b)
            L = X[:, f] <= t
            gain = r[L].sum() ** 2 / L.sum() + r[~L].sum() ** 2 / (~L).sum() - r.sum() ** 2 / r.size
            if gain > best[0] * (1 + 1e-12):
                best = (gain, f, t)
    _, f, t = best
    F0 = np.log(p0 / (1 - p0))
    F = np.full(y.size, F0)
    for side in (X[:, f] <= t, X[:, f] > t):
        g = r[side].sum() / (side.sum() * p0 * (1 - p0))
        dev = lambda step: np.sum(2 * (np.logaddexp(0, F0 + step) - y[side] * (F0 + step)))
        while dev(g) > dev(0.0):
            g *= 0.5
        F[side] = F0 + g
    return f, t, expit(F)


@pytest.mark.parametrize("seed", range(5))
def test_one_stage_stump_matches_exhaustive_oracle(seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(120, 3))
    y = (X[:, seed % 3] + r.normal(0, 0.8, 120) > 0).astype(int)
    m = fit_gbm(X, y, {"n_trees": 1, "interaction_depth": 1, "learning_rate": 1.0, "min_node_obs": 1})
    f, t, p = best_stump_oracle(X, y)
    assert m.trees[0].feature[0] == f and m.trees[0].threshold[0] == pytest.approx(t, abs=1e-12)
    assert np.allclose(m.predict_proba(X), p, atol=1e-12)


def test_training_deviance_nonincreasing():
    X, y = separable(500, seed=3)
    y = np.where(np.random.default_rng(0).random(500) < 0.1, 1 - y, y)
    m = fit_gbm(X, y, {"n_trees": 100, "interaction_depth": 3, "learning_rate": 1.0, "min_node_obs": 1})
    trace = np.array(m.diagnostics["train_deviance"])
    assert trace.size == 101
    assert np.all(np.diff(trace) <= 1e-9 * trace[:-1])


def test_zero_stages_predicts_base_rate():
    X, y = separable(200)
    m = fit_gbm(X, y, {"n_trees": 0})
    assert np.allclose(m.predict_proba(X), y.mean())


@pytest.mark.parametrize("lr", [0.0, -0.1, 1.5])
def test_learning_rate_validated(lr):
    X, y = separable(50)
    with pytest.raises(ConfigError, match="learning_rate"):
        fit_gbm(X, y, {"learning_rate": lr})


def test_degenerate_target():
    with pytest.raises(ValueError, match="degenerate target"):
        fit_gbm(np.zeros((10, 2)), np.zeros(10, int))


def test_missing_values_rejected():
    X, y = separable(50)
    m = fit_gbm(X, y, {"n_trees": 2})
    X[0, 0] = np.nan
    with pytest.raises(ValueError, match="impute"):
        m.predict_proba(X)


def test_staged_predictions_match_truncation():
    X, y = separable(200)
    m = fit_gbm(X, y, {"n_trees": 30})
    staged = m.staged_predict_proba(X, [0, 10, 30])
    assert np.array_equal(staged[1], m.truncated(10).predict_proba(X))
    assert np.array_equal(staged[2], m.predict_proba(X))


# ------------------------------------------------------------------ tuning and importance

def test_expand_grid_cartesian():
    pts = expand_grid({"a": [1, 2], "b": [3, 4, 5]})
    assert len(pts) == 6 and {"a": 2, "b": 5} in pts


def test_cv_single_point_grid():
    X, y = separable(300)
    res = cv_tune(X, y, "gbm", {"n_trees": [50], "interaction_depth": [2]}, folds=3, seed=1)
    assert res.best_params["n_trees"] == 50 and len(res.table) == 1
    assert not np.isnan(res.oof_scores).any() and 0 < res.threshold < 1


def test_cv_prefers_working_learning_rate():
    X, y = separable(300)
    grid = {"n_trees": [50], "interaction_depth": [2], "learning_rate": [1e-6, 0.1]}
    res = cv_tune(X, y, "gbm", grid, folds=3, seed=1, smote=None)
    assert res.best_params["learning_rate"] == 0.1


def test_cv_deterministic():
    X, y = separable(200)
    grid = {"n_trees": [10, 30], "interaction_depth": [1, 2]}
    a = cv_tune(X, y, "gbm", grid, folds=3, seed=5)
    b = cv_tune(X, y, "gbm", grid, folds=3, seed=5)
    assert a.best_params == b.best_params
    assert a.table.equals(b.table) and np.array_equal(a.oof_scores, b.oof_scores)


def test_cv_staged_scores_equal_separate_fits():
    X, y = separable(200)
    joint = cv_tune(X, y, "gbm", {"n_trees": [10, 30]}, folds=3, seed=2)
    alone = cv_tune(X, y, "gbm", {"n_trees": [10]}, folds=3, seed=2)
    assert joint.table.loc[0, "mean_auc"] == alone.table.loc[0, "mean_auc"]


def test_importance_single_signal():
    r = np.random.default_rng(0)
    X = r.normal(size=(400, 4))
    y = (X[:, 2] > 0).astype(int)
    for m in (fit_gbm(X, y, {"n_trees": 20}), fit_rf(X, y, {"n_trees": 30, "mtry": 4})):
        imp = variable_importance(m).table
        assert imp.loc[0, "variable"] == "x2" and imp.loc[0, "score"] == 100.0
        assert imp["score"].between(0, 100).all() and list(imp["rank"]) == [1, 2, 3, 4]


def test_importance_csv(tmp_path):
    X, y = separable(100)
    imp = variable_importance(fit_gbm(X, y, {"n_trees": 5}, feature_names=list("abcd")))
    imp.to_csv(tmp_path / "imp.csv")
    assert (tmp_path / "imp.csv").read_text().splitlines()[0] == "rank,variable,score"


@pytest.mark.parametrize("kind", ["rf", "gbm"])
def test_json_roundtrip(kind):
    X, y = separable(200)
    fit = fit_rf if kind == "rf" else fit_gbm
    m = fit(X, y, {"n_trees": 10}, seed=2)
    again = TrainedEnsemble.from_dict(json.loads(m.to_json()))
    assert np.array_equal(again.predict_proba(X), m.predict_proba(X))
    assert again.to_json() == m.to_json()
