import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from sepsis_lpa.profiles import boxplot_data, compare_groups, describe_by_profile, format_pvalue

SIZES = (33, 35, 39, 27)


def reference_death_flags():
    """Profile labels and death flags with the printed counts 0 / 2 / 0 / 6."""
    labels = np.repeat([1, 2, 3, 4], SIZES)
    died = np.zeros(labels.size, dtype=int)
    died[np.flatnonzero(labels == 2)[:2]] = 1
    died[np.flatnonzero(labels == 4)[:6]] = 1
    return labels, died


def test_death_row_matches_printed_counts():
    labels, died = reference_death_flags()
    s = describe_by_profile(pd.DataFrame({"age": np.arange(labels.size, dtype=float)}), labels,
                            categorical={"Death": died})
    row = s.table.set_index("variable").loc["Death, n (%)"]
    assert [row[f"Subphenotype {g}"] for g in (1, 2, 3, 4)] == ["0 (0.0)", "2 (5.7)", "0 (0.0)", "6 (22.2)"]
    assert s.sizes == {1: 33, 2: 35, 3: 39, 4: 27}
    assert s.table.iloc[0][["Subphenotype 1", "Subphenotype 4"]].tolist() == ["33", "27"]


def test_death_row_p_value_small():
    # printed p is 0.001; the small expected counts trigger the permutation test
    labels, died = reference_death_flags()
    p = compare_groups(died, labels, "categorical", seed=0)
    assert 0.0 < p < 0.01


def test_single_member_profile():
    frame = pd.DataFrame({"age": [5.0, 6.0, 7.0, 9.0], "gcs": [15.0, 14.0, 13.0, 8.0]})
    s = describe_by_profile(frame, np.array([1, 1, 1, 2]))
    t = s.table.set_index("variable")
    assert t.loc["age", "Subphenotype 2"] == "9.00 (NA)"
    assert t.loc["gcs", "Subphenotype 2"] == "8.00 [8.00, 8.00]"


def test_cells_use_observed_values_only():
    frame = pd.DataFrame({"hr": [100.0, np.nan, 120.0, np.nan], "pao2": [np.nan, np.nan, 80.0, 90.0]})
    s = describe_by_profile(frame, np.array([1, 1, 2, 2]))
    t = s.table.set_index("variable")
    assert t.loc["hr", "Subphenotype 1"] == "100.00 (NA)"
    assert t.loc["pao2*", "Subphenotype 1"] == "NA"  # log-displayed row, no observed values
    st_ = s.stats.set_index(["feature", "profile"])
    assert st_.loc[("pao2", 2), "mean"] == pytest.approx(np.mean(np.log10([80.0, 90.0])))


def test_means_recover_generator_parameters():
    r = np.random.default_rng(0)
    means = [0.0, 3.0, -2.0]
    labels = np.repeat([1, 2, 3], 400)
    x = np.concatenate([r.normal(m, 1.0, 400) for m in means])
    s = describe_by_profile(pd.DataFrame({"hr": x}), labels).stats.set_index("profile")
    for g, m in zip((1, 2, 3), means):
        assert abs(s.loc[g, "mean"] - m) < 3.5 / np.sqrt(400)


def test_summary_json_and_csv(tmp_path):
    labels, died = reference_death_flags()
    frame = pd.DataFrame({"hr": np.linspace(80, 150, labels.size)})
    s = describe_by_profile(frame, labels, categorical={"Death": died})
    s.to_csv(tmp_path / "t.csv")
    payload = json.loads(s.to_json())
    assert payload["sizes"] == {"1": 33, "2": 35, "3": 39, "4": 27}
    assert "Kruskal-Wallis" in payload["metadata"]["tests"].values()
    assert pd.read_csv(tmp_path / "t.csv").columns[-2:].tolist() == ["p", "test"]


# ------------------------------------------------------------------ tests between groups

def test_power_example():
    r = np.random.default_rng(1)
    x = np.r_[r.normal(0, 1, 30), r.normal(5, 1, 30)]
    g = np.repeat([0, 1], 30)
    for kind in ("continuous_mean", "continuous_median"):
        assert compare_groups(x, g, kind) < 0.001


def test_constant_values_p_one():
    assert compare_groups(np.ones(12), np.repeat([1, 2, 3], 4), "continuous_median") == 1.0
    assert compare_groups(np.ones(12), np.repeat([1, 2, 3], 4), "continuous_mean") == 1.0


@pytest.mark.parametrize("kind", ["continuous_mean", "continuous_median"])
def test_null_p_values_uniform(kind):
    ps = []
    for seed in range(300):
        r = np.random.default_rng(seed)
        ps.append(compare_groups(r.normal(size=80), np.repeat([1, 2, 3, 4], 20), kind))
    assert stats.kstest(ps, "uniform").pvalue > 0.01


def test_matches_scipy_reference():
    r = np.random.default_rng(2)
    groups = [r.normal(m, 1, 25) for m in (0, 0.4, 0.8)]
    x, g = np.concatenate(groups), np.repeat([0, 1, 2], 25)
    assert compare_groups(x, g, "continuous_mean") == pytest.approx(stats.f_oneway(*groups).pvalue)
    assert compare_groups(x, g, "continuous_median") == pytest.approx(stats.kruskal(*groups).pvalue)


def test_chi_square_large_counts_uses_asymptotic():
    r = np.random.default_rng(3)
    g = np.repeat([0, 1], 200)
    c = np.r_[r.random(200) < 0.3, r.random(200) < 0.5].astype(int)
    table = pd.crosstab(g, c).to_numpy()
    expected = stats.chi2_contingency(table, correction=False).pvalue
    assert compare_groups(c, g, "categorical") == pytest.approx(expected, rel=1e-10)


def test_kruskal_invariant_to_monotone_transform():
    r = np.random.default_rng(4)
    x, g = r.normal(size=60), np.repeat([1, 2, 3], 20)
    assert compare_groups(np.exp(x), g, "continuous_median") == pytest.approx(
        compare_groups(x, g, "continuous_median"), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_p_in_unit_interval_and_relabel_invariant(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=40)
    g = r.integers(0, 3, 40)
    relabelled = np.array([7, 3, 5])[g]
    for kind in ("continuous_mean", "continuous_median"):
        p = compare_groups(x, g, kind)
        assert 0.0 <= p <= 1.0
        assert compare_groups(x, relabelled, kind) == pytest.approx(p, rel=1e-12)


def test_empty_group_excluded_with_warning(caplog):
    x = np.array([1.0, 2.0, 3.0, 4.0, np.nan, np.nan])
    g = np.array([1, 1, 2, 2, 3, 3])
    assert np.isfinite(compare_groups(x, g, "continuous_mean"))
    assert "excluded: [3]" in caplog.text
    assert np.isnan(compare_groups(x[:2], g[:2], "continuous_mean"))


def test_format_pvalue():
    assert format_pvalue(0.0004) == "<0.001" and format_pvalue(0.596) == "0.596"
    assert format_pvalue(float("nan")) == "NA"


def test_unknown_kind():
    with pytest.raises(ValueError, match="unknown test kind"):
        compare_groups([1.0], [1], "t-test")


# ------------------------------------------------------------------ box plots

def test_boxplot_five_numbers_and_outliers():
    x = np.r_[np.arange(1.0, 11.0), 100.0]
    box = boxplot_data(pd.DataFrame({"hr": x}), np.ones(x.size, int)).iloc[0]
    q1, med, q3 = np.quantile(x, [0.25, 0.5, 0.75])
    assert (box["q1"], box["median"], box["q3"]) == (q1, med, q3)
    assert box.whisker_lo == 1.0 and box.whisker_hi == 10.0 and box.outliers == "100"
