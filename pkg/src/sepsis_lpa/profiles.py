"""Per-profile descriptive statistics, between-profile tests and box-plot data."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import pandas as pd
from scipy import stats

logger = logging.getLogger(__name__)

KINDS = ("continuous_mean", "continuous_median", "categorical")
TEST_NAMES = {"continuous_mean": "one-way ANOVA", "continuous_median": "Kruskal-Wallis",
              "categorical": "chi-square"}
PERMUTATION_DRAWS = 10_000
UNDEFINED = "NA"

# display rule per feature: mean(SD) or median[IQR], optional log10 display scale
DEFAULT_DISPLAY = {
    "age": ("mean_sd", None), "platelet": ("median_iqr", None), "ptt": ("median_iqr", None),
    "inr": ("median_iqr", None), "creatinine": ("mean_sd", "log10"), "paco2": ("mean_sd", None),
    "pao2": ("mean_sd", "log10"), "map": ("mean_sd", None), "chloride": ("mean_sd", None),
    "ph": ("mean_sd", None), "bicarbonate": ("mean_sd", None), "hematocrit": ("mean_sd", None),
    "temperature": ("mean_sd", None), "glucose": ("mean_sd", None), "sodium": ("mean_sd", None),
    "potassium": ("mean_sd", None), "hr": ("mean_sd", None), "rr": ("median_iqr", None),
    "bilirubin": ("median_iqr", None), "gcs": ("median_iqr", None),
    "gcs_motor": ("median_iqr", None), "gcs_verbal": ("median_iqr", None),
    "gcs_eye": ("median_iqr", None),
}


def _groups(values, labels):
    values = np.asarray(values)
    labels = np.asarray(labels)
    if values.shape[0] != labels.shape[0]:
        raise ValueError("values and labels must have the same length")
    return values, labels, list(np.unique(labels))


def _chi2_stat(table: np.ndarray) -> float:
    """Pearson statistic; categories never observed are dropped."""
    table = table[:, table.sum(axis=0) > 0]
    table = table[table.sum(axis=1) > 0]
    if table.shape[0] < 2 or table.shape[1] < 2:
        return 0.0
    exp = table.sum(axis=1, keepdims=True) * table.sum(axis=0, keepdims=True) / table.sum()
    return float(((table - exp) ** 2 / exp).sum())


def _chi2_perm_stats(g: np.ndarray, c: np.ndarray, G: int, C: int, draws: int, rng) -> np.ndarray:
    """Pearson statistics for ``draws`` random relabellings (vectorised)."""
    n = g.size
    perms = np.argsort(rng.random((draws, n)), axis=1)
    cells = g[perms] * C + c[None, :] + (np.arange(draws) * G * C)[:, None]
    tables = np.bincount(cells.ravel(), minlength=draws * G * C).reshape(draws, G, C).astype(float)
    rows = tables.sum(axis=2, keepdims=True)
    cols = tables.sum(axis=1, keepdims=True)
    exp = rows * cols / n
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(exp > 0, (tables - exp) ** 2 / exp, 0.0)
    return terms.sum(axis=(1, 2))


def compare_groups(feature_values, labels, kind: str, seed: int = 0,
                   draws: int = PERMUTATION_DRAWS) -> float:
    """Between-group p-value: ANOVA (``continuous_mean``), Kruskal-Wallis
    (``continuous_median``) or chi-square of independence (``categorical``).

    Missing values (NaN) are ignored per cell; a group left empty is dropped with
    a warning and fewer than two usable groups gives NaN. The chi-square p comes
    from ``draws`` label permutations when any expected count is below 5.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown test kind {kind!r}")
    values, labels, levels = _groups(feature_values, labels)
    if kind == "categorical":
        obs = pd.notna(values)
        v, lab = values[obs], labels[obs]
    else:
        values = values.astype(float)
        obs = np.isfinite(values)
        v, lab = values[obs], labels[obs]
    used = [g for g in levels if np.any(lab == g)]
    dropped = [g for g in levels if g not in used]
    if dropped:
        logger.warning("groups without observed values excluded: %s",
                       [g.item() if hasattr(g, "item") else g for g in dropped])
    if len(used) < 2:
        return float("nan")
    samples = [v[lab == g] for g in used]

    if kind == "continuous_mean":
        allv = np.concatenate(samples)
        if np.ptp(allv) == 0:
            return 1.0
        if allv.size - len(samples) < 1:
            return float("nan")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            p = stats.f_oneway(*samples).pvalue
        if not np.isfinite(p):  # zero within-group spread with distinct group means
            p = 0.0
        return float(p)
    if kind == "continuous_median":
        if np.ptp(np.concatenate(samples)) == 0:
            return 1.0
        return float(stats.kruskal(*samples).pvalue)

    cats, c = np.unique(v.astype(str), return_inverse=True)
    gmap = {g: i for i, g in enumerate(used)}
    g = np.array([gmap[x] for x in lab])
    G, C = len(used), cats.size
    table = np.zeros((G, C))
    np.add.at(table, (g, c), 1)
    stat = _chi2_stat(table)
    if C < 2 or stat == 0.0:
        return 1.0
    exp = table.sum(axis=1, keepdims=True) * table.sum(axis=0, keepdims=True) / table.sum()
    if np.any(exp < 5):
        rng = np.random.default_rng(seed)
        null = _chi2_perm_stats(g, c, G, C, draws, rng)
        return float((1 + np.sum(null >= stat - 1e-9 * max(stat, 1.0))) / (draws + 1))
    dof = (G - 1) * (C - 1)
    return float(stats.chi2.sf(stat, dof))


def _fmt(v: float, digits: int = 2) -> str:
    return UNDEFINED if v is None or not np.isfinite(v) else f"{v:.{digits}f}"


def format_pvalue(p: float) -> str:
    if p is None or not np.isfinite(p):
        return UNDEFINED
    return "<0.001" if p < 0.001 else f"{p:.3f}"


@dataclass
class ProfileSummary:
    table: pd.DataFrame           # display table: variable, profile columns, p, test
    stats: pd.DataFrame           # long numeric statistics per feature x profile
    sizes: dict                   # profile -> n
    metadata: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        self.table.to_csv(path, index=False)

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, (np.floating, float)):
                return None if not np.isfinite(v) else float(v)
            if isinstance(v, np.integer):
                return int(v)
            return v
        recs = [{k: clean(v) for k, v in r.items()} for r in self.stats.to_dict("records")]
        return json.dumps({"metadata": self.metadata, "sizes": {str(k): v for k, v in self.sizes.items()},
                           "table": self.table.to_dict("records"), "stats": recs},
                          indent=2, sort_keys=True)


def describe_by_profile(features, labels, display_spec: Mapping | None = None,
                        categorical: Mapping | None = None, feature_labels: Mapping | None = None,
                        seed: int = 0) -> ProfileSummary:
    """Summaries per profile on observed (unimputed) values.

    ``features`` is a :class:`~sepsis_lpa.cohort.FeatureMatrix` or a DataFrame
    with NaN for missing. ``display_spec`` maps feature -> (``mean_sd`` |
    ``median_iqr``, ``None`` | ``log10``); unlisted features use mean(SD).
    ``categorical`` maps a row label to a 0/1 vector (e.g. vasopressor use,
    death), reported as n (%).
    """
    if hasattr(features, "to_frame"):
        frame = features.to_frame().drop(columns="encounter_id")
    else:
        frame = pd.DataFrame(features)
    labels = np.asarray(labels)
    if len(frame) != labels.size:
        raise ValueError("one label per row required")
    spec = dict(DEFAULT_DISPLAY)
    spec.update(display_spec or {})
    names = feature_labels or {}
    levels = sorted(np.unique(labels).tolist())
    sizes = {g: int(np.sum(labels == g)) for g in levels}
    cols = [f"Subphenotype {g}" for g in levels]
    rows = [dict({"variable": "n", "p": "", "test": ""},
                 **{c: str(sizes[g]) for c, g in zip(cols, levels)})]
    long = []
    for feat in frame.columns:
        display, transform = spec.get(feat, ("mean_sd", None))
        x = frame[feat].to_numpy(dtype=float)
        if transform == "log10":
            with np.errstate(divide="ignore", invalid="ignore"):
                x = np.where(x > 0, np.log10(x), np.nan)
        label = names.get(feat, feat) + ("*" if transform else "")
        row = {"variable": label}
        for c, g in zip(cols, levels):
            v = x[(labels == g) & np.isfinite(x)]
            rec = {"feature": feat, "profile": g, "n_obs": int(v.size), "mean": np.nan, "sd": np.nan,
                   "median": np.nan, "q1": np.nan, "q3": np.nan}
            if v.size:
                q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
                rec.update(mean=float(v.mean()), sd=float(v.std(ddof=1)) if v.size > 1 else np.nan,
                           median=float(med), q1=float(q1), q3=float(q3))
            long.append(rec)
            if display == "median_iqr":
                row[c] = (f"{_fmt(rec['median'])} [{_fmt(rec['q1'])}, {_fmt(rec['q3'])}]"
                          if v.size else UNDEFINED)
            else:
                row[c] = f"{_fmt(rec['mean'])} ({_fmt(rec['sd'])})" if v.size else UNDEFINED
        kind = "continuous_median" if display == "median_iqr" else "continuous_mean"
        row["p"] = format_pvalue(compare_groups(x, labels, kind))
        row["test"] = TEST_NAMES[kind]
        rows.append(row)
    for label, flag in (categorical or {}).items():
        flag = np.asarray(flag).astype(int)
        row = {"variable": f"{label}, n (%)"}
        for c, g in zip(cols, levels):
            k = int(flag[labels == g].sum())
            row[c] = f"{k} ({100.0 * k / sizes[g]:.1f})"
            long.append({"feature": label, "profile": g, "n_obs": sizes[g], "count": k,
                         "pct": 100.0 * k / sizes[g]})
        row["p"] = format_pvalue(compare_groups(flag, labels, "categorical", seed=seed))
        row["test"] = TEST_NAMES["categorical"]
        rows.append(row)
    table = pd.DataFrame(rows, columns=["variable"] + cols + ["p", "test"])
    meta = {"tests": TEST_NAMES, "note": "test choice follows the display rule of each row: ANOVA "
            "for mean(SD), Kruskal-Wallis for median[IQR], chi-square (permutation p when an "
            "expected count is below 5) for n (%)"}
    return ProfileSummary(table, pd.DataFrame(long), sizes, meta)


def boxplot_data(features, labels) -> pd.DataFrame:
    """Five-number summaries per feature and profile with Tukey whiskers
    (1.5 IQR) and the outliers beyond them, ';'-separated."""
    if hasattr(features, "to_frame"):
        frame = features.to_frame().drop(columns="encounter_id")
    else:
        frame = pd.DataFrame(features)
    labels = np.asarray(labels)
    rows = []
    for feat in frame.columns:
        x = frame[feat].to_numpy(dtype=float)
        for g in sorted(np.unique(labels).tolist()):
            v = np.sort(x[(labels == g) & np.isfinite(x)])
            if v.size == 0:
                rows.append({"feature": feat, "profile": g, "n": 0})
                continue
            q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
            iqr = q3 - q1
            inside = v[(v >= q1 - 1.5 * iqr) & (v <= q3 + 1.5 * iqr)]
            out = v[(v < q1 - 1.5 * iqr) | (v > q3 + 1.5 * iqr)]
            rows.append({"feature": feat, "profile": g, "n": int(v.size),
                         "whisker_lo": float(inside.min()), "q1": float(q1), "median": float(med),
                         "q3": float(q3), "whisker_hi": float(inside.max()),
                         "outliers": ";".join(f"{o:.6g}" for o in out)})
    return pd.DataFrame(rows, columns=["feature", "profile", "n", "whisker_lo", "q1", "median", "q3",
                                       "whisker_hi", "outliers"])
