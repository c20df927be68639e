"""ROC statistics: AUC, threshold metrics, stratified bootstrap intervals and DeLong tests."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import pandas as pd
from scipy import stats

logger = logging.getLogger(__name__)

METRICS = ("sensitivity", "specificity", "accuracy", "ppv", "npv")
METRIC_LABELS = {"auc": "AUC", "sensitivity": "Sensitivity", "specificity": "Specificity",
                 "accuracy": "Accuracy", "ppv": "PPV", "npv": "NPV"}
UNDEFINED = "NA"
MAX_UNDEFINED_FRACTION = 0.10


class UndefinedStatistic(ValueError):
    pass


def _split(scores, labels):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and the same length")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0/1")
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedStatistic("AUC is undefined with a single class")
    return pos, neg


def auc(scores, labels) -> float:
    """Mann-Whitney AUC, P(case > control) + P(tie) / 2, via midranks."""
    pos, neg = _split(scores, labels)
    m, n = pos.size, neg.size
    ranks = stats.rankdata(np.concatenate([pos, neg]))
    return float((ranks[:m].sum() - m * (m + 1) / 2.0) / (m * n))


def auc_batch(pos: np.ndarray, neg: np.ndarray) -> np.ndarray:
    """Row-wise AUC for score matrices of cases (B x m) and controls (B x n)."""
    m, n = pos.shape[1], neg.shape[1]
    ranks = stats.rankdata(np.concatenate([pos, neg], axis=1), axis=1)
    return (ranks[:, :m].sum(axis=1) - m * (m + 1) / 2.0) / (m * n)


def _confusion_metrics(tp, fn, fp, tn) -> dict:
    with np.errstate(divide="ignore", invalid="ignore"):
        tp, fn, fp, tn = (np.asarray(v, dtype=float) for v in (tp, fn, fp, tn))
        out = {
            "sensitivity": tp / (tp + fn),
            "specificity": tn / (tn + fp),
            "accuracy": (tp + tn) / (tp + fn + fp + tn),
            "ppv": np.where(tp + fp > 0, tp / (tp + fp), np.nan),
            "npv": np.where(tn + fn > 0, tn / (tn + fn), np.nan),
        }
    return out


def threshold_metrics(scores, labels, threshold: float) -> dict:
    """Confusion-matrix ratios with ``score >= threshold`` called positive.

    PPV or NPV is NaN when nothing is called positive or negative respectively.
    """
    pos, neg = _split(scores, labels)
    tp = int(np.sum(pos >= threshold))
    fp = int(np.sum(neg >= threshold))
    m = _confusion_metrics(tp, pos.size - tp, fp, neg.size - fp)
    return {k: float(v) for k, v in m.items()}


def youden_threshold(scores, labels) -> float:
    """Score cut-off maximising sensitivity + specificity - 1.

    Candidates are the observed scores; among equal J the higher cut-off wins.
    """
    pos, neg = _split(scores, labels)
    cand = np.unique(np.concatenate([pos, neg]))
    ps, ns = np.sort(pos), np.sort(neg)
    sens = 1.0 - np.searchsorted(ps, cand, side="left") / ps.size
    spec = np.searchsorted(ns, cand, side="left") / ns.size
    J = sens + spec - 1.0
    best = np.flatnonzero(J >= J.max() - 1e-12)[-1]
    return float(cand[best])


class Interval(NamedTuple):
    lo: float
    hi: float


def _stratified_indices(rng, m: int, n: int, B: int):
    return rng.integers(0, m, size=(B, m)), rng.integers(0, n, size=(B, n))


def _percentile(reps: np.ndarray, alpha: float, name: str) -> Interval:
    bad = ~np.isfinite(reps)
    if bad.mean() > MAX_UNDEFINED_FRACTION:
        raise UndefinedStatistic(
            f"{name} undefined on {bad.sum()} of {reps.size} bootstrap resamples "
            f"(more than {MAX_UNDEFINED_FRACTION:.0%})")
    lo, hi = np.quantile(reps[~bad], [alpha / 2.0, 1.0 - alpha / 2.0])
    return Interval(float(lo), float(hi))


def bootstrap_ci(statistic: Callable, scores, labels, B: int = 2000, alpha: float = 0.05,
                 seed: int = 0) -> Interval:
    """Percentile interval of ``statistic(scores, labels)`` over stratified resamples.

    Cases and controls are resampled separately so every replicate keeps the
    original class sizes. The statistic may return NaN or raise
    :class:`UndefinedStatistic` on a replicate; more than 10% such replicates
    is an error.
    """
    if B < 100:
        raise ValueError("B must be at least 100")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    pos, neg = _split(scores, labels)
    rng = np.random.default_rng(seed)
    ip, ineg = _stratified_indices(rng, pos.size, neg.size, B)
    if statistic is auc:
        reps = auc_batch(pos[ip], neg[ineg])
    else:
        lab = np.concatenate([np.ones(pos.size, dtype=int), np.zeros(neg.size, dtype=int)])
        reps = np.empty(B)
        for b in range(B):
            try:
                reps[b] = statistic(np.concatenate([pos[ip[b]], neg[ineg[b]]]), lab)
            except UndefinedStatistic:
                reps[b] = np.nan
    return _percentile(reps, alpha, getattr(statistic, "__name__", "statistic"))


def bootstrap_metrics(scores, labels, threshold: float, B: int = 2000, alpha: float = 0.05,
                      seed: int = 0) -> dict:
    """AUC and the five threshold metrics with percentile intervals from one shared
    set of stratified resamples. Returns ``{metric: (point, lo, hi)}``; an interval
    is ``(nan, nan)`` when the metric is undefined on too many resamples."""
    if B < 100:
        raise ValueError("B must be at least 100")
    pos, neg = _split(scores, labels)
    rng = np.random.default_rng(seed)
    ip, ineg = _stratified_indices(rng, pos.size, neg.size, B)
    out = {"auc": (auc(scores, labels),) + tuple(_percentile(auc_batch(pos[ip], neg[ineg]), alpha, "auc"))}
    point = threshold_metrics(scores, labels, threshold)
    hit_p = (pos >= threshold)[ip].sum(axis=1)
    hit_n = (neg >= threshold)[ineg].sum(axis=1)
    reps = _confusion_metrics(hit_p, pos.size - hit_p, hit_n, neg.size - hit_n)
    for k in METRICS:
        try:
            ci = _percentile(reps[k], alpha, k)
        except UndefinedStatistic as exc:
            logger.info("%s", exc)
            ci = Interval(math.nan, math.nan)
        out[k] = (point[k],) + tuple(ci)
    return out


def format_ci(point: float, lo: float, hi: float, digits: int = 3) -> str:
    """Render as ``0.918(0.881 - 0.956)``; undefined parts print as NA."""
    def f(v):
        return UNDEFINED if v is None or not np.isfinite(v) else f"{v:.{digits}f}"
    if not np.isfinite(lo) or not np.isfinite(hi):
        return f(point)
    return f"{f(point)}({f(lo)} - {f(hi)})"


def format_p(p: float) -> str:
    if p is None or not np.isfinite(p):
        return UNDEFINED
    return "<0.0001" if p < 1e-4 else f"{p:.4f}"


# DeLong -------------------------------------------------------------------------

def _structural_components(pos: np.ndarray, neg: np.ndarray):
    """Placement values V10 (per case) and V01 (per control) via midranks."""
    m, n = pos.size, neg.size
    tz = stats.rankdata(np.concatenate([pos, neg]))
    tx = stats.rankdata(pos)
    ty = stats.rankdata(neg)
    v10 = (tz[:m] - tx) / n
    v01 = 1.0 - (tz[m:] - ty) / m
    return v10, v01


def delong_variance(scores, labels) -> tuple:
    """``(auc, variance)`` of the Mann-Whitney AUC from its structural components."""
    pos, neg = _split(scores, labels)
    v10, v01 = _structural_components(pos, neg)
    var = v10.var(ddof=1) / pos.size + v01.var(ddof=1) / neg.size
    return float(v10.mean()), float(var)


@dataclass
class DelongResult:
    auc_a: float
    auc_b: float
    z: float
    p: float
    var_a: float = math.nan
    var_b: float = math.nan
    cov_ab: float = 0.0

    @property
    def var_diff(self) -> float:
        return self.var_a + self.var_b - 2.0 * self.cov_ab


def _z_test(diff: float, var: float) -> tuple:
    if not var > 1e-300:
        if diff == 0.0:
            return 0.0, 1.0
        raise UndefinedStatistic("degenerate variance of the AUC difference")
    z = diff / math.sqrt(var)
    return z, float(2.0 * stats.norm.sf(abs(z)))


def delong_paired(scores_a, scores_b, labels, zero_covariance: bool = False) -> DelongResult:
    """Paired comparison of two markers scored on the same instances.

    ``zero_covariance`` drops the cross-marker term, which reduces the test to
    the unpaired variance (an internal consistency check).
    """
    labels = np.asarray(labels).astype(int)
    pa, na = _split(scores_a, labels)
    pb, nb = _split(scores_b, labels)
    m, n = pa.size, na.size
    v10 = np.vstack([_structural_components(pa, na)[0], _structural_components(pb, nb)[0]])
    v01 = np.vstack([_structural_components(pa, na)[1], _structural_components(pb, nb)[1]])
    S = np.cov(v10, ddof=1) / m + np.cov(v01, ddof=1) / n
    auc_a, auc_b = float(v10[0].mean()), float(v10[1].mean())
    cov = 0.0 if zero_covariance else float(S[0, 1])
    res = DelongResult(auc_a, auc_b, math.nan, math.nan, float(S[0, 0]), float(S[1, 1]), cov)
    res.z, res.p = _z_test(auc_a - auc_b, res.var_diff)
    return res


def delong_unpaired(scores_a, labels_a, scores_b, labels_b) -> DelongResult:
    """Comparison of AUCs from two independent evaluation sets."""
    auc_a, var_a = delong_variance(scores_a, labels_a)
    auc_b, var_b = delong_variance(scores_b, labels_b)
    if not (var_a > 0 and var_b > 0):
        raise UndefinedStatistic("degenerate DeLong variance in one evaluation set")
    z, p = _z_test(auc_a - auc_b, var_a + var_b)
    return DelongResult(auc_a, auc_b, z, p, var_a, var_b, 0.0)


# Reports ------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Metric rows (one per window x model x metric) plus comparison p-values."""
    rows: list = field(default_factory=list)
    comparisons: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add_model(self, window: str, model: str, metrics: dict, threshold: float, n_case: int,
                  n_control: int, threshold_policy: str = "youden") -> None:
        for k, (point, lo, hi) in metrics.items():
            self.rows.append({"window": window, "model": model, "metric": k, "point": point, "lo": lo,
                              "hi": hi, "formatted": format_ci(point, lo, hi), "threshold": threshold,
                              "threshold_policy": threshold_policy, "n_case": n_case,
                              "n_control": n_control})

    def add_comparison(self, window: str, model: str, reference: str, result: DelongResult,
                       method: str) -> None:
        self.comparisons.append({"window": window, "model": model, "reference": reference,
                                 "method": method, "auc_model": result.auc_a,
                                 "auc_reference": result.auc_b, "z": result.z, "p": result.p})

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def table(self, threshold_policy: str = "youden", method: str = "delong_paired") -> pd.DataFrame:
        """Table-4 layout: rows are (window, metric), columns are models, cells are
        ``point(lo - hi)``; a trailing P value row per window compares each model
        with the reference."""
        df = self.frame()
        if df.empty:
            return pd.DataFrame()
        df = df[df["threshold_policy"].isin([threshold_policy, "none"])]
        models = list(dict.fromkeys(df["model"]))
        out = []
        for window in dict.fromkeys(df["window"]):
            sub = df[df["window"] == window]
            for metric in ("auc",) + METRICS:
                row = {"window": window, "metric": METRIC_LABELS[metric]}
                for mod in models:
                    cell = sub[(sub["model"] == mod) & (sub["metric"] == metric)]
                    row[mod] = cell["formatted"].iloc[0] if len(cell) else ""
                out.append(row)
            row = {"window": window, "metric": "P value"}
            for mod in models:
                hit = [c for c in self.comparisons
                       if c["window"] == window and c["model"] == mod and c["method"] == method]
                row[mod] = format_p(hit[0]["p"]) if hit else ""
            out.append(row)
        return pd.DataFrame(out, columns=["window", "metric"] + models)

    def to_csv(self, path) -> None:
        self.table().to_csv(path, index=False)

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            if isinstance(v, (np.floating, np.integer)):
                return clean(v.item())
            return v
        payload = {"metadata": self.metadata,
                   "rows": [{k: clean(v) for k, v in r.items()} for r in self.rows],
                   "comparisons": [{k: clean(v) for k, v in c.items()} for c in self.comparisons]}
        return json.dumps(payload, indent=2, sort_keys=True)
