"""Power transforms and standardization applied before mixture fitting."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

LAMBDA_BOUNDS = (-5.0, 5.0)
BRANCH_EPS = 1e-8
KINDS = ("yeo_johnson", "log10", "log_e", "identity")
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def yeo_johnson(x, lam: float):
    """Yeo-Johnson transform of ``x`` (scalar or array) for a fixed lambda."""
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    if lam == 1.0:
        return float(x[0]) if scalar else x.copy()
    out = np.empty_like(x)
    pos = x >= 0
    lp = np.log1p(x[pos])
    if abs(lam) < BRANCH_EPS:
        out[pos] = lp
    else:
        out[pos] = np.expm1(lam * lp) / lam
    ln = np.log1p(-x[~pos])
    if abs(2.0 - lam) < BRANCH_EPS:
        out[~pos] = -ln
    else:
        out[~pos] = -np.expm1((2.0 - lam) * ln) / (2.0 - lam)
    return float(out[0]) if scalar else out


def yeo_johnson_loglik(xs, lam: float) -> float:
    """Gaussian profile log-likelihood of the transformed sample, Jacobian included."""
    xs = np.asarray(xs, dtype=float)
    n = xs.size
    with np.errstate(over="ignore", invalid="ignore"):
        y = yeo_johnson(xs, lam)
        var = y.var()
    if not np.isfinite(var) or var <= 0:
        return -np.inf
    jac = np.sum(np.sign(xs) * np.log1p(np.abs(xs)))
    return -0.5 * n * math.log(var) + (lam - 1.0) * jac


def _golden_max(f, lo: float, hi: float, tol: float = 1e-6) -> float:
    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def fit_yeo_johnson(xs, bounds=LAMBDA_BOUNDS, tol: float = 1e-6, coarse_step: float = 0.05) -> float:
    """Maximum-likelihood lambda on ``bounds``.

    A coarse scan locates the best bracket, then golden-section search refines
    it to ``tol``.
    """
    xs = np.asarray(xs, dtype=float)
    xs = xs[np.isfinite(xs)]
    if xs.size < 3:
        raise ValueError("need at least 3 finite values to fit a Yeo-Johnson lambda")
    if np.ptp(xs) == 0:
        raise ValueError("degenerate sample: constant input")
    lo, hi = bounds
    grid = np.linspace(lo, hi, int(round((hi - lo) / coarse_step)) + 1)
    ll = np.array([yeo_johnson_loglik(xs, g) for g in grid])
    k = int(np.argmax(ll))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    lam = _golden_max(lambda t: yeo_johnson_loglik(xs, t), a, b, tol)
    # the bracket end may beat the interior on a boundary optimum
    for edge in (a, b):
        if yeo_johnson_loglik(xs, edge) > yeo_johnson_loglik(xs, lam):
            lam = edge
    return float(lam)


@dataclass
class FeatureTransform:
    name: str
    kind: str = "yeo_johnson"
    lam: float | None = None
    loglik: float | None = None
    center: float = 0.0
    scale: float = 1.0

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "yeo_johnson":
            y = yeo_johnson(x, self.lam)
        elif self.kind == "log10":
            y = np.log10(x)
        elif self.kind == "log_e":
            y = np.log(x)
        else:
            y = x.copy()
        return (y - self.center) / self.scale


@dataclass
class TransformSpec:
    features: list = field(default_factory=list)
    standardize: bool = True

    @property
    def names(self):
        return [f.name for f in self.features]

    def transform(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape[1] != len(self.features):
            raise ValueError("column count does not match the transform spec")
        return np.column_stack([t.apply(values[:, j]) for j, t in enumerate(self.features)])

    def to_json(self) -> str:
        return json.dumps({"standardize": self.standardize,
                           "features": [asdict(f) for f in self.features]}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TransformSpec":
        raw = json.loads(text)
        return cls([FeatureTransform(**f) for f in raw["features"]], raw["standardize"])


def fit_transform_spec(values: np.ndarray, names, kinds=None, standardize: bool = True) -> TransformSpec:
    """Fit a per-column transform (Yeo-Johnson by default), then optional z-scoring."""
    values = np.asarray(values, dtype=float)
    kinds = kinds or {}
    feats = []
    for j, name in enumerate(names):
        kind = kinds.get(name, "yeo_johnson")
        if kind not in KINDS:
            raise ValueError(f"{name}: unknown transform {kind!r}")
        col = values[:, j]
        t = FeatureTransform(name, kind)
        if kind in ("log10", "log_e") and np.any(col <= 0):
            raise ValueError(f"{name}: log transform needs strictly positive values")
        if kind == "yeo_johnson":
            t.lam = fit_yeo_johnson(col)
            t.loglik = yeo_johnson_loglik(col, t.lam)
        if standardize:
            y = t.apply(col)
            sd = y.std()
            t.center = float(y.mean())
            t.scale = float(sd) if sd > 0 else 1.0
        feats.append(t)
    return TransformSpec(feats, standardize)
