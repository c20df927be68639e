"""BIC model selection over covariance families and component counts."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .em import (DEFAULT_MAX_ITER, DEFAULT_RESTARTS, DEFAULT_TOL, FitFailed, MixtureModel, em_fit,
                 kmeans_starts)
from .families import FAMILY_CODES

logger = logging.getLogger(__name__)

DEFAULT_G_RANGE = tuple(range(1, 10))


class SelectionFailed(RuntimeError):
    pass


@dataclass
class SelectionGrid:
    cells: pd.DataFrame  # family, G, bic, loglik, n_params, status, reason
    best: tuple

    def to_csv(self, path) -> None:
        self.cells.to_csv(path, index=False)

    def pivot(self) -> pd.DataFrame:
        return self.cells.pivot(index="G", columns="family", values="bic")


def model_select(X, G_range=DEFAULT_G_RANGE, families=FAMILY_CODES, init=None,
                 tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                 restarts: int = DEFAULT_RESTARTS, seed: int = 0):
    """Fit every (family, G) cell and keep the one with the largest BIC.

    Failed fits are kept in the grid with their reason. k-means starts are shared
    by all families at a given G. Returns ``(grid, best_model)``.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    G_range = tuple(G_range)
    if not G_range:
        raise ValueError("G_range is empty")
    rows, best, best_model = [], None, None
    for G in G_range:
        if init is not None:
            starts = init.get(G) if isinstance(init, dict) else init
        elif G == 1:
            starts = [np.ones((n, 1))]
        elif n > G:
            starts = kmeans_starts(X, G, restarts, seed)
        else:
            starts = None
        for fam in families:
            row = {"family": fam, "G": G, "bic": np.nan, "loglik": np.nan,
                   "n_params": np.nan, "status": "ok", "reason": ""}
            try:
                if n <= G:
                    raise FitFailed(f"n={n} does not exceed G={G}")
                model = em_fit(X, G, fam, init=starts, tol=tol, max_iter=max_iter, seed=seed)
            except FitFailed as exc:
                row.update(status="failed", reason=str(exc))
                logger.debug("%s G=%d failed: %s", fam, G, exc)
            else:
                b = model.bic()
                row.update(bic=b, loglik=model.loglik, n_params=model.n_params,
                           status="ok" if model.converged else "max_iter")
                if best is None or b > best:
                    best, best_model = b, model
            rows.append(row)
    cells = pd.DataFrame(rows, columns=["family", "G", "bic", "loglik", "n_params", "status", "reason"])
    if best_model is None:
        detail = "; ".join(f"{r['family']}/G={r['G']}: {r['reason']}" for r in rows)
        raise SelectionFailed(f"every mixture fit failed: {detail}")
    logger.info("best mixture: %s with G=%d (BIC %.2f)", best_model.family, best_model.G, best)
    return SelectionGrid(cells, (best_model.family, best_model.G)), best_model
