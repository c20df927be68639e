"""Optional SVG figures: BIC by family and G, and per-profile box plots."""
from __future__ import annotations

import logging

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    # fixed ids and no creation date, so reruns produce identical files
    matplotlib.rcParams["svg.hashsalt"] = "sepsis-lpa"
    return plt


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


def bic_plot(grid: pd.DataFrame, path) -> None:
    """BIC against G, one line per covariance family; failed cells are gaps."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for fam, sub in grid.groupby("family", sort=True):
        sub = sub.sort_values("G")
        ax.plot(sub["G"], sub["bic"], marker="o", ms=3, lw=1, label=fam)
    ok = grid.dropna(subset=["bic"])
    if len(ok):
        best = ok.loc[ok["bic"].idxmax()]
        ax.scatter([best["G"]], [best["bic"]], s=80, facecolors="none", edgecolors="k", zorder=5)
    ax.set_xlabel("Number of profiles (G)")
    ax.set_ylabel("BIC")
    ax.legend(ncol=2, fontsize=7, frameon=False)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def profile_boxplot(box: pd.DataFrame, path, ncols: int = 5) -> None:
    """Box plots from precomputed summaries (see ``profiles.boxplot_data``)."""
    plt = _pyplot()
    feats = list(dict.fromkeys(box["feature"]))
    nrows = max(1, int(np.ceil(len(feats) / ncols)))
    fig, axes = plt.subplots(nrows, ncols, figsize=(2.4 * ncols, 2.2 * nrows), squeeze=False)
    for ax, feat in zip(axes.ravel(), feats):
        sub = box[(box["feature"] == feat) & (box["n"] > 0)]
        stats = []
        for _, r in sub.iterrows():
            out = r["outliers"]
            fl = [float(v) for v in str(out).split(";")] if isinstance(out, str) and out else []
            stats.append({"label": str(r["profile"]), "whislo": r["whisker_lo"], "q1": r["q1"],
                          "med": r["median"], "q3": r["q3"], "whishi": r["whisker_hi"], "fliers": fl})
        if stats:
            ax.bxp(stats, showfliers=True, flierprops={"markersize": 2})
        ax.set_title(feat, fontsize=8)
        ax.tick_params(labelsize=7)
    for ax in axes.ravel()[len(feats):]:
        ax.set_visible(False)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)
