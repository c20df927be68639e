"""EM estimation of constrained Gaussian mixtures."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .families import (FAMILIES, CovParams, DegenerateFit, free_parameter_count,
                       log_component_densities, m_step)

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 500
DEFAULT_RESTARTS = 10
FLOOR_FACTOR = 1e-6
MONOTONE_SLACK = 1e-10


def _row_logsumexp(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    m[~np.isfinite(m)] = 0.0
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


@dataclass
class MixtureModel:
    family: str
    G: int
    d: int
    weights: np.ndarray
    means: np.ndarray
    cov: CovParams
    loglik: float
    n_obs: int
    n_iter: int = 0
    converged: bool = False
    seed: int | None = None
    loglik_trace: list = field(default_factory=list, repr=False)

    @property
    def covariances(self) -> np.ndarray:
        return self.cov.covariances()

    @property
    def n_params(self) -> int:
        return free_parameter_count(self.family, self.d, self.G)

    def bic(self, n: int | None = None) -> float:
        return bic(self, self.n_obs if n is None else n)

    def to_dict(self) -> dict:
        return {
            "family": self.family, "G": self.G, "d": self.d,
            "weights": self.weights.tolist(), "means": self.means.tolist(),
            "volume": self.cov.volume.tolist(), "shape": self.cov.shape.tolist(),
            "orientation": self.cov.orientation.tolist(),
            "loglik": self.loglik, "bic": self.bic(), "n_obs": self.n_obs,
            "n_iter": self.n_iter, "converged": self.converged, "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "MixtureModel":
        cov = CovParams(np.array(raw["volume"], dtype=float), np.array(raw["shape"], dtype=float),
                        np.array(raw["orientation"], dtype=float))
        return cls(raw["family"], raw["G"], raw["d"], np.array(raw["weights"], dtype=float),
                   np.array(raw["means"], dtype=float), cov, raw["loglik"], raw["n_obs"],
                   raw.get("n_iter", 0), raw.get("converged", False), raw.get("seed"))


class FitFailed(RuntimeError):
    pass


def bic(model: MixtureModel, n: int) -> float:
    """2 loglik - k ln n (larger is better)."""
    return 2.0 * model.loglik - model.n_params * np.log(n)


def kmeans_labels(X: np.ndarray, G: int, rng: np.random.Generator, max_iter: int = 100) -> np.ndarray:
    """Lloyd's algorithm from k-means++ seeding; returns hard labels."""
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, G):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    C = np.array(centers)
    labels = np.full(n, -1)
    for _ in range(max_iter):
        dist = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
        new = dist.argmin(axis=1)
        for k in range(G):
            if not np.any(new == k):
                # refill an empty cluster with the point farthest from its center
                far = int(dist[np.arange(n), new].argmax())
                new[far] = k
                dist[far] = 0.0
        if np.array_equal(new, labels):
            break
        labels = new
        C = np.array([X[labels == k].mean(axis=0) for k in range(G)])
    return labels


def kmeans_starts(X: np.ndarray, G: int, restarts: int = DEFAULT_RESTARTS, seed: int = 0) -> list:
    """One-hot responsibility matrices from ``restarts`` seeded k-means++ runs."""
    children = np.random.SeedSequence([seed, G]).spawn(restarts)
    starts = []
    for ss in children:
        labels = kmeans_labels(X, G, np.random.default_rng(ss))
        starts.append(np.eye(G)[labels])
    return starts


def _relabel_by_weight(weights, means, cov):
    order = np.argsort(-weights, kind="stable")
    return weights[order], means[order], CovParams(cov.volume[order], cov.shape[order],
                                                   cov.orientation[order])


def _em_single(X, Z, family, tol, max_iter, floor, check_monotone):
    n = X.shape[0]
    weights, means, cov = m_step(family, X, Z)
    trace = []
    floor_hits = 0
    converged = False
    for it in range(1, max_iter + 1):
        logp = log_component_densities(X, means, cov) + np.log(weights)
        lse = _row_logsumexp(logp)
        ll = float(lse.sum())
        if not np.isfinite(ll):
            raise DegenerateFit("non-finite log-likelihood")
        if trace and check_monotone and ll < trace[-1] - MONOTONE_SLACK:
            raise AssertionError(f"EM log-likelihood decreased by {trace[-1] - ll:.3g} at iteration {it}")
        trace.append(ll)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < tol * abs(trace[-1]):
            converged = True
            break
        if it == max_iter:
            break
        Z = np.exp(logp - lse[:, None])
        weights, means, cov = m_step(family, X, Z, prev=cov)
        if (not np.all(np.isfinite(cov.volume)) or not np.all(np.isfinite(means))
                or cov.min_variance() <= 0):
            raise DegenerateFit("covariance lost positive definiteness")
        if cov.min_variance() < floor:
            floor_hits += 1
            if floor_hits >= 2:
                raise DegenerateFit("covariance at the variance floor on consecutive iterations")
        else:
            floor_hits = 0
    return weights, means, cov, trace, converged


def em_fit(X, G: int, family: str, init=None, tol: float = DEFAULT_TOL,
           max_iter: int = DEFAULT_MAX_ITER, restarts: int = DEFAULT_RESTARTS, seed: int = 0,
           check_monotone: bool = False) -> MixtureModel:
    """Fit a G-component mixture of the given covariance family by EM.

    ``init`` is either None (k-means++ multistart with ``restarts`` runs from
    ``seed``) or a list of n x G responsibility matrices. The start reaching the
    highest final log-likelihood wins. Raises :class:`FitFailed` when every start
    degenerates.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be a 2-D array")
    n, d = X.shape
    if family not in FAMILIES:
        raise ValueError(f"unknown covariance family {family!r}")
    if n <= G:
        raise ValueError(f"need more observations than components (n={n}, G={G})")
    if np.isnan(X).any():
        raise ValueError("X contains missing values; impute first")
    if init is None:
        init = kmeans_starts(X, G, restarts, seed) if G > 1 else [np.ones((n, 1))]
    elif isinstance(init, np.ndarray):
        init = [init]
    floor = FLOOR_FACTOR * float(np.mean(X.var(axis=0)))

    best, reasons = None, []
    for Z0 in init:
        Z0 = np.asarray(Z0, dtype=float)
        if Z0.shape != (n, G):
            raise ValueError(f"initial responsibilities must be {n} x {G}")
        try:
            # collapsing components produce inf/nan on the way; they are caught as DegenerateFit
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                w, mu, cov, trace, conv = _em_single(X, Z0, family, tol, max_iter, floor, check_monotone)
        except DegenerateFit as exc:
            reasons.append(str(exc))
            continue
        except np.linalg.LinAlgError as exc:
            reasons.append(f"linear algebra failure: {exc}")
            continue
        if best is None or trace[-1] > best[3][-1]:
            best = (w, mu, cov, trace, conv)
    if best is None:
        raise FitFailed("; ".join(sorted(set(reasons))) or "no successful start")
    w, mu, cov, trace, conv = best
    w, mu, cov = _relabel_by_weight(w, mu, cov)
    return MixtureModel(family, G, d, w, mu, cov, trace[-1], n, len(trace), conv, seed, trace)


def posterior(model: MixtureModel, X) -> np.ndarray:
    """Responsibilities pi_k phi_k(x) / sum_j pi_j phi_j(x), computed in log space."""
    X = np.asarray(X, dtype=float)
    logp = log_component_densities(X, model.means, model.cov) + np.log(model.weights)
    return np.exp(logp - _row_logsumexp(logp)[:, None])


def log_likelihood(model: MixtureModel, X) -> float:
    X = np.asarray(X, dtype=float)
    logp = log_component_densities(X, model.means, model.cov) + np.log(model.weights)
    return float(_row_logsumexp(logp).sum())


def assign_profiles(model: MixtureModel, X) -> np.ndarray:
    """Profile labels 1..G by maximum responsibility (lowest index wins ties).

    Components are already ordered by descending weight after fitting.
    """
    return posterior(model, X).argmax(axis=1) + 1
