"""Error measures for sampled ensembles and empirical convergence orders."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.integrate import trapezoid

from .exceptions import DegenerateSampleError, InputError, InsufficientDataError

__all__ = [
    "ErrorReport",
    "silverman_bandwidth",
    "kde_grid",
    "kde_on_grid",
    "tv_error",
    "rel_mean_error",
    "rel_cov_error",
    "fit_order",
    "default_noise_floor",
]

_KERNEL_CUTOFF = 10.0  # kernel terms beyond 10 bandwidths are below 2e-22


@dataclass
class ErrorReport:
    scheme: str
    d: int
    n_steps: int
    H: float
    eps_score: float
    n_particles: int
    seed: int
    tv_error: float = math.nan
    rel_mean_error: float = math.nan
    rel_cov_error: float = math.nan
    n_diverged: int = 0
    runtime: float = 0.0
    failed: bool = False
    message: str = ""

    @property
    def n_ok(self):
        return self.n_particles - self.n_diverged

    def as_dict(self):
        return asdict(self)


def silverman_bandwidth(samples, rule="silverman"):
    """Rule-of-thumb Gaussian KDE bandwidth.

    ``rule="silverman"`` gives ``0.9 min(std, IQR/1.34) n^(-1/5)``;
    ``rule="normal"`` gives ``1.06 std n^(-1/5)``.
    """
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n < 2:
        raise DegenerateSampleError("need at least two samples for a bandwidth")
    sd = x.std(ddof=1)
    if rule == "normal":
        spread = sd
        factor = 1.06
    elif rule == "silverman":
        q75, q25 = np.percentile(x, [75, 25])
        iqr = (q75 - q25) / 1.34
        spread = min(sd, iqr) if iqr > 0 else sd
        factor = 0.9
    else:
        raise ValueError(f"unknown bandwidth rule {rule!r}")
    if not spread > 0:
        raise DegenerateSampleError("samples have zero spread")
    return factor * spread * n ** (-0.2)


def kde_grid(samples, bandwidth, n_points=2048):
    """Uniform grid over ``[mean - 6 sd, mean + 6 sd]`` joined with the sample range padded by 5h."""
    x = np.asarray(samples, dtype=float).ravel()
    mu, sd = x.mean(), x.std(ddof=1) if x.size > 1 else 0.0
    lo = min(mu - 6 * sd, x.min() - 5 * bandwidth)
    hi = max(mu + 6 * sd, x.max() + 5 * bandwidth)
    return np.linspace(lo, hi, n_points)


def kde_on_grid(samples, grid, bandwidth=None, rule="silverman"):
    """Gaussian-kernel density estimate evaluated on ``grid`` by direct summation.

    Samples are sorted once; each block of grid points sums only the kernels
    within ten bandwidths, in a fixed order, so the output is reproducible.
    """
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    if bandwidth is None:
        bandwidth = silverman_bandwidth(x, rule)
    h = float(bandwidth)
    if not h > 0:
        raise DegenerateSampleError("bandwidth must be positive")
    g = np.asarray(grid, dtype=float)
    out = np.zeros_like(g)
    reach = _KERNEL_CUTOFF * h
    block = 32
    for lo in range(0, g.size, block):
        gb = g[lo:lo + block]
        i0 = np.searchsorted(x, gb[0] - reach, side="left")
        i1 = np.searchsorted(x, gb[-1] + reach, side="right")
        if i1 <= i0:
            continue
        u = (gb[:, None] - x[None, i0:i1]) / h
        out[lo:lo + block] = np.exp(-0.5 * u * u).sum(axis=1)
    return out / (x.size * h * math.sqrt(2 * math.pi))


def tv_error(estimated, analytic, grid):
    """Total variation ``1/2 int |p - q|`` by the trapezoid rule on a shared grid."""
    p = np.asarray(estimated, dtype=float)
    q = np.asarray(analytic, dtype=float)
    g = np.asarray(grid, dtype=float)
    if p.shape != q.shape or p.shape != g.shape:
        raise InputError(f"grid mismatch: {p.shape}, {q.shape}, {g.shape}")
    return 0.5 * float(trapezoid(np.abs(p - q), g))


def rel_mean_error(ensemble, true_mean):
    """``||mean - m||_2 / max(||m||_2, 1)``."""
    X = np.asarray(ensemble, dtype=float)
    m = np.atleast_1d(np.asarray(true_mean, dtype=float))
    if X.ndim == 1:
        X = X[:, None]
    return float(np.linalg.norm(X.mean(axis=0) - m) / max(np.linalg.norm(m), 1.0))


def rel_cov_error(ensemble, true_cov):
    """Frobenius error of the unbiased sample covariance relative to ``||C||_F``."""
    X = np.asarray(ensemble, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    C = np.atleast_2d(np.asarray(true_cov, dtype=float))
    if X.shape[0] < 2:
        raise InputError("need at least two particles for a covariance")
    S = np.atleast_2d(np.cov(X, rowvar=False))
    return float(np.linalg.norm(S - C) / np.linalg.norm(C))


def default_noise_floor(n_particles):
    """Particle-noise plateau ``1e-4`` at ``J = 1e7``, scaled as ``J^(-1/2)``."""
    return 1e-4 * math.sqrt(1e7 / n_particles)


def fit_order(points, floor=1e-4):
    """Least-squares slope of ``log(error)`` against ``log(step)``.

    ``points`` is an iterable of ``(step, error)``; pairs with error at or
    below ``floor`` (or non-finite) are dropped before fitting.
    """
    pts = [(float(h), float(e)) for h, e in points]
    usable = [(h, e) for h, e in pts if h > 0 and math.isfinite(e) and e > floor]
    if len(usable) < 3:
        raise InsufficientDataError(
            f"need >= 3 points above the floor {floor:g}, have {len(usable)} of {len(pts)}"
        )
    lh = np.log([h for h, _ in usable])
    le = np.log([e for _, e in usable])
    slope, _ = np.polyfit(lh, le, 1)
    return float(slope)
