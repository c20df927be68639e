"""Covariance families Sigma_k = volume_k * D_k diag(shape_k) D_k^T and their M-steps.

Identifiers follow the usual three-letter code (volume, shape, orientation):
E = equal across components, V = variable, I = identity/coordinate axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# code -> (distribution, volume, shape, orientation)
FAMILIES = {
    "EII": ("spherical", "equal", "equal", "NA"),
    "VII": ("spherical", "variable", "equal", "NA"),
    "EEI": ("diagonal", "equal", "equal", "coordinate axes"),
    "VEI": ("diagonal", "variable", "equal", "coordinate axes"),
    "EVI": ("diagonal", "equal", "variable", "coordinate axes"),
    "VVI": ("diagonal", "variable", "variable", "coordinate axes"),
    "EEE": ("ellipsoidal", "equal", "equal", "equal"),
    "EEV": ("ellipsoidal", "equal", "equal", "variable"),
    "VEV": ("ellipsoidal", "variable", "equal", "variable"),
    "VVV": ("ellipsoidal", "variable", "variable", "variable"),
}
FAMILY_CODES = tuple(FAMILIES)
DIAGONAL = frozenset(c for c, a in FAMILIES.items() if a[0] == "diagonal")


class DegenerateFit(RuntimeError):
    """EM cannot continue: a component collapsed or a covariance lost definiteness."""


def free_parameter_count(family: str, d: int, G: int) -> int:
    """Number of free parameters: means, mixing weights and covariance terms.

    Counted structurally from the volume/shape/orientation decomposition: one
    volume, d-1 shape and d(d-1)/2 rotation parameters, shared or per component.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown covariance family {family!r}")
    if d < 1 or G < 1:
        raise ValueError("d and G must be at least 1")
    dist, vol, shape, orient = FAMILIES[family]
    per = {"equal": 1, "variable": G}
    k = per[vol]
    if dist != "spherical":
        k += per[shape] * (d - 1)
    if dist == "ellipsoidal":
        k += per[orient] * d * (d - 1) // 2
    return G * d + (G - 1) + k


@dataclass
class CovParams:
    volume: np.ndarray       # (G,)
    shape: np.ndarray        # (G, d), each row has product 1
    orientation: np.ndarray  # (G, d, d), columns are axes

    def covariances(self) -> np.ndarray:
        D, A, lam = self.orientation, self.shape, self.volume
        return np.einsum("gij,gj,gkj->gik", D, A * lam[:, None], D)

    def min_variance(self) -> float:
        return float(np.min(self.volume[:, None] * self.shape))


def _geo(v: np.ndarray, axis=-1) -> np.ndarray:
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise DegenerateFit("nonpositive variance in covariance update")
    return np.exp(np.mean(np.log(v), axis=axis))


def _eig_desc(S: np.ndarray):
    w, V = np.linalg.eigh(S)
    return w[::-1].copy(), V[:, ::-1].copy()


def _scatter_diag(X, Z, mu):
    return np.stack([Z[:, k] @ np.square(X - mu[k]) for k in range(mu.shape[0])])


def _scatter_full(X, Z, mu):
    out = []
    for k in range(mu.shape[0]):
        R = X - mu[k]
        out.append((R * Z[:, k:k + 1]).T @ R)
    return np.stack(out)


def m_step(family: str, X: np.ndarray, Z: np.ndarray, prev: CovParams | None = None,
           inner_max: int = 20, inner_tol: float = 1e-8):
    """Weights, means and constrained covariance parameters maximising the expected
    complete-data log-likelihood for responsibilities ``Z`` (n x G)."""
    n, d = X.shape
    G = Z.shape[1]
    nk = Z.sum(axis=0)
    if np.any(nk < 1.0):
        raise DegenerateFit(f"component collapse (effective size {nk.min():.3g} < 1)")
    weights = nk / n
    means = (Z.T @ X) / nk[:, None]
    eye = np.broadcast_to(np.eye(d), (G, d, d)).copy()
    ones = np.ones((G, d))

    if family in ("EII", "VII", "EEI", "VEI", "EVI", "VVI"):
        Wd = _scatter_diag(X, Z, means)
        if family == "EII":
            lam = np.full(G, Wd.sum() / (n * d))
            cov = CovParams(lam, ones, eye)
        elif family == "VII":
            cov = CovParams(Wd.sum(axis=1) / (nk * d), ones, eye)
        elif family == "EEI":
            B = Wd.sum(axis=0)
            g = _geo(B)
            cov = CovParams(np.full(G, g / n), np.tile(B / g, (G, 1)), eye)
        elif family == "EVI":
            g = _geo(Wd)
            cov = CovParams(np.full(G, g.sum() / n), Wd / g[:, None], eye)
        elif family == "VVI":
            var = Wd / nk[:, None]
            g = _geo(var)
            cov = CovParams(g, var / g[:, None], eye)
        else:  # VEI: alternate volume and common shape updates
            A = prev.shape[0].copy() if prev is not None else np.ones(d)
            for _ in range(inner_max):
                lam = (Wd / A).sum(axis=1) / (nk * d)
                B = (Wd / lam[:, None]).sum(axis=0)
                A_new = B / _geo(B)
                done = np.max(np.abs(A_new - A)) < inner_tol * max(1.0, np.max(np.abs(A)))
                A = A_new
                if done:
                    break
            lam = (Wd / A).sum(axis=1) / (nk * d)
            cov = CovParams(lam, np.tile(A, (G, 1)), eye)
        return weights, means, cov

    W = _scatter_full(X, Z, means)
    if family == "EEE":
        w, V = _eig_desc(W.sum(axis=0) / n)
        g = _geo(w)
        cov = CovParams(np.full(G, g), np.tile(w / g, (G, 1)), np.tile(V, (G, 1, 1)))
    elif family == "VVV":
        vols, shapes, axes = [], [], []
        for k in range(G):
            w, V = _eig_desc(W[k] / nk[k])
            g = _geo(w)
            vols.append(g)
            shapes.append(w / g)
            axes.append(V)
        cov = CovParams(np.array(vols), np.array(shapes), np.array(axes))
    else:
        eig = [_eig_desc(W[k]) for k in range(G)]
        Om = np.array([e[0] for e in eig])
        D = np.array([e[1] for e in eig])
        if np.any(Om <= 0):
            raise DegenerateFit("singular component scatter matrix")
        if family == "EEV":
            S = Om.sum(axis=0)
            g = _geo(S)
            cov = CovParams(np.full(G, g / n), np.tile(S / g, (G, 1)), D)
        elif family == "VEV":
            A = prev.shape[0].copy() if prev is not None else np.ones(d)
            for _ in range(inner_max):
                lam = (Om / A).sum(axis=1) / (nk * d)
                B = (Om / lam[:, None]).sum(axis=0)
                A_new = B / _geo(B)
                done = np.max(np.abs(A_new - A)) < inner_tol * max(1.0, np.max(np.abs(A)))
                A = A_new
                if done:
                    break
            lam = (Om / A).sum(axis=1) / (nk * d)
            cov = CovParams(lam, np.tile(A, (G, 1)), D)
        else:
            raise ValueError(f"unknown covariance family {family!r}")
    return weights, means, cov


def log_component_densities(X: np.ndarray, means: np.ndarray, cov: CovParams) -> np.ndarray:
    """log N(x_i; mu_k, Sigma_k) for every row and component (n x G)."""
    n, d = X.shape
    G = means.shape[0]
    out = np.empty((n, G))
    const = d * np.log(2.0 * np.pi)
    var = cov.volume[:, None] * cov.shape
    axis_aligned = np.array_equal(cov.orientation, np.broadcast_to(np.eye(d), cov.orientation.shape))
    if axis_aligned:
        # sum_j (x_j - mu_j)^2 / v_j expanded so it runs as two matrix products
        inv = 1.0 / var
        maha = (X * X) @ inv.T - 2.0 * X @ (means * inv).T + (means * means * inv).sum(axis=1)
        return -0.5 * (const + np.log(var).sum(axis=1) + maha)
    for k in range(G):
        Y = (X - means[k]) @ cov.orientation[k]
        maha = (Y * Y / var[k]).sum(axis=1)
        out[:, k] = -0.5 * (const + np.log(var[k]).sum() + maha)
    return out
