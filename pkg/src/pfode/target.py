"""Analytic Gaussian-mixture targets pushed through the forward process.

Under the forward process a mixture ``sum_k w_k N(m_k, C_k)`` stays a mixture,
with component ``k`` becoming ``N(lam_t m_k, lam_t^2 C_k + sigma_t^2 I)``.
Densities, scores and moments are therefore available in closed form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from .exceptions import InputError
from .schedule import VarianceSchedule

__all__ = [
    "GaussianMixture",
    "ScoreField",
    "delta",
    "forward_density",
    "log_forward_density",
    "true_score",
    "responsibilities",
    "perturbed_score",
    "moments",
    "marginal_density_first_dim",
    "sample_mixture",
    "random_mixture",
    "default_mixture",
    "DEFAULT_MIXTURE",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Weighted sum of full-covariance Gaussians in ``dim`` dimensions.

    Parameters
    ----------
    weights : array of shape (K,)
    means : array of shape (K, d)
    covs : array of shape (K, d, d)
    """

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        m = np.asarray(self.means, dtype=float)
        if m.ndim == 1:
            # K scalar means of a 1-D mixture
            m = m[:, None]
        K, d = m.shape
        C = np.asarray(self.covs, dtype=float)
        if C.ndim == 1:
            C = C.reshape(K, 1, 1)
        if w.shape != (K,) or C.shape != (K, d, d):
            raise ValueError(
                f"inconsistent shapes: weights {w.shape}, means {m.shape}, covs {C.shape}"
            )
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be positive and sum to 1, got {w}")
        if not np.allclose(C, np.swapaxes(C, 1, 2), rtol=0, atol=1e-12):
            raise ValueError("component covariances must be symmetric")
        chol = np.empty_like(C)
        for k in range(K):
            try:
                chol[k] = np.linalg.cholesky(C[k])
            except np.linalg.LinAlgError:
                raise ValueError(f"covariance of component {k} is not positive definite") from None
        for name, val in (("weights", w), ("means", m), ("covs", C), ("chol", chol)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return self.means.shape[0]

    @classmethod
    def from_dict(cls, spec):
        """Build from ``{"weights": [...], "means": [[...]], "covs": [[[...]]]}``.

        For 1-D mixtures ``means`` and ``covs`` (variances) may be flat lists.
        """
        return cls(spec["weights"], spec["means"], spec["covs"])

    def mean(self):
        return self.weights @ self.means

    def centered(self):
        """Same mixture shifted so its overall mean is zero."""
        return GaussianMixture(self.weights, self.means - self.mean(), self.covs)

    def to_dict(self):
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }


DEFAULT_MIXTURE = {
    "weights": [0.56, 0.2, 0.24],
    "means": [-2.96, -1.36, -0.17],
    "covs": [1.78, 1.79, 1.81],
}


def default_mixture():
    """The package's 1-D three-mode test mixture."""
    return GaussianMixture.from_dict(DEFAULT_MIXTURE)


def random_mixture(d, K=5, seed=0):
    """Seeded random mixture: means ~ U[-3, 3]^d, covs ``A A^T / d + 0.5 I``, weights ~ Dir(1)."""
    rng = np.random.default_rng(seed)
    means = rng.uniform(-3.0, 3.0, size=(K, d))
    A = rng.standard_normal((K, d, d))
    covs = A @ np.swapaxes(A, 1, 2) / d + 0.5 * np.eye(d)
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    weights = rng.dirichlet(np.ones(K))
    weights = weights / weights.sum()
    return GaussianMixture(weights, means, covs)


class _ForwardParams:
    """Factored component parameters of ``q_t`` at one forward time."""

    __slots__ = ("mu", "prec", "logdet", "log_w")

    def __init__(self, mixture, schedule, t):
        lam = schedule.lam(t)
        sig2 = schedule.sigma(t) ** 2
        d = mixture.dim
        eye = np.eye(d)
        self.mu = lam * mixture.means
        self.prec = np.empty_like(mixture.covs)
        self.logdet = np.empty(mixture.n_components)
        for k in range(mixture.n_components):
            cov = lam * lam * mixture.covs[k] + sig2 * eye
            c, low = cho_factor(cov, lower=True)
            self.logdet[k] = 2.0 * np.log(np.diag(c)).sum()
            p = cho_solve((c, low), eye)
            self.prec[k] = 0.5 * (p + p.T)
        self.log_w = np.log(mixture.weights)


def _params(mixture, schedule, t, cache=None):
    if cache is None:
        return _ForwardParams(mixture, schedule, t)
    key = float(t)
    p = cache.get(key)
    if p is None:
        if len(cache) > 4096:
            cache.clear()
        p = cache[key] = _ForwardParams(mixture, schedule, t)
    return p


def _as_points(x, d):
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    if d == 1 and x.ndim == 1 and x.shape[0] != 1:
        # a flat vector of 1-D points
        x = x[:, None]
        single = False
    x = np.atleast_2d(x)
    if x.shape[-1] != d:
        raise InputError(f"expected points of dimension {d}, got shape {x.shape}")
    return x, single


def _component_terms(p, x):
    """Per-component log densities (n, K) and precision-weighted residuals (K, n, d)."""
    n, d = x.shape
    K = p.mu.shape[0]
    logp = np.empty((n, K))
    z = np.empty((K, n, d))
    for k in range(K):
        diff = x - p.mu[k]
        zk = diff @ p.prec[k]
        quad = np.einsum("ij,ij->i", zk, diff)
        logp[:, k] = p.log_w[k] - 0.5 * (d * _LOG_2PI + p.logdet[k] + quad)
        z[k] = zk
    return logp, z


def log_forward_density(mixture, schedule, t, y, _cache=None):
    """Log of ``q_t(y)``; ``y`` is one point (d,) or a batch (n, d)."""
    x, single = _as_points(y, mixture.dim)
    logp, _ = _component_terms(_params(mixture, schedule, t, _cache), x)
    out = logsumexp(logp, axis=1)
    return out[0] if single else out


def forward_density(mixture, schedule, t, y):
    """Density of the forward marginal ``q_t`` at ``y``."""
    return np.exp(log_forward_density(mixture, schedule, t, y))


def responsibilities(mixture, schedule, t, y):
    """Posterior component probabilities under ``q_t``, shape (n, K)."""
    x, _ = _as_points(y, mixture.dim)
    logp, _ = _component_terms(_params(mixture, schedule, t), x)
    return np.exp(logp - logsumexp(logp, axis=1, keepdims=True))


def _score_forward(mixture, schedule, t, x, cache=None):
    if not np.all(np.isfinite(x)):
        raise InputError("score requested at a non-finite point")
    logp, z = _component_terms(_params(mixture, schedule, t, cache), x)
    r = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    return -np.einsum("nk,knd->nd", r, z)


def true_score(mixture, schedule, t_rev, x, _cache=None):
    """Exact score ``grad log q_{T - t_rev}(x)`` (reverse-time argument)."""
    t = schedule.T - t_rev
    # schedule._check clips tiny negative round-off at t_rev = T
    pts, single = _as_points(x, mixture.dim)
    s = _score_forward(mixture, schedule, t, pts, _cache)
    return s[0] if single else s


def delta(x):
    """Piecewise-quadratic C^1 ramp whose second derivative is +1 on even and -1 on odd cells."""
    x = np.asarray(x, dtype=float)
    fl = np.floor(x)
    n = np.floor(fl / 2.0)
    frac = x - fl
    even = fl - 2.0 * n == 0.0
    out = np.where(even, n + 0.5 * frac * frac, n + 1.0 - 0.5 * (1.0 - frac) ** 2)
    return out if out.ndim else float(out)


@dataclass(eq=False)
class ScoreField:
    """True mixture score plus the artificial error ``eps_score * delta(x_1) / sqrt(d) * ones``.

    Calling the field with ``(t_rev, x)`` returns the perturbed score. Factored
    component covariances are cached per evaluation time and reused across
    particles and steps.
    """

    mixture: GaussianMixture
    schedule: VarianceSchedule
    eps_score: float = 0.0
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if not self.eps_score >= 0:
            raise ValueError(f"eps_score must be >= 0, got {self.eps_score}")

    def prepare(self, times):
        """Factor the component covariances for every reverse time in ``times``."""
        for t_rev in np.atleast_1d(times):
            _params(self.mixture, self.schedule, self.schedule.T - t_rev, self._cache)

    def true_score(self, t_rev, x):
        return true_score(self.mixture, self.schedule, t_rev, x, self._cache)

    def perturbation(self, x):
        pts, single = _as_points(x, self.mixture.dim)
        d = self.mixture.dim
        bump = self.eps_score * delta(pts[:, 0]) / math.sqrt(d)
        out = np.repeat(bump[:, None], d, axis=1)
        return out[0] if single else out

    def __call__(self, t_rev, x):
        s = self.true_score(t_rev, x)
        if self.eps_score == 0.0:
            return s
        return s + self.perturbation(x)


def perturbed_score(field, t_rev, x):
    return field(t_rev, x)


def moments(mixture, schedule, t):
    """Exact mean (d,) and covariance (d, d) of ``q_t``."""
    lam = schedule.lam(t)
    sig2 = schedule.sigma(t) ** 2
    w, m, C = mixture.weights, mixture.means, mixture.covs
    mean = lam * (w @ m)
    second = np.einsum("k,kij->ij", w, lam * lam * C + lam * lam * np.einsum("ki,kj->kij", m, m))
    cov = second + sig2 * np.eye(mixture.dim) - np.outer(mean, mean)
    return mean, 0.5 * (cov + cov.T)


def marginal_density_first_dim(mixture, schedule, t, y1):
    """Density of the first coordinate of ``q_t`` at ``y1`` (scalar or array)."""
    lam = schedule.lam(t)
    sig2 = schedule.sigma(t) ** 2
    mu = lam * mixture.means[:, 0]
    var = lam * lam * mixture.covs[:, 0, 0] + sig2
    y = np.asarray(y1, dtype=float)
    yy = y[..., None]
    logp = np.log(mixture.weights) - 0.5 * (_LOG_2PI + np.log(var) + (yy - mu) ** 2 / var)
    out = np.exp(logsumexp(logp, axis=-1))
    return out if out.ndim else float(out)


def sample_mixture(mixture, seed, n):
    """Draw ``n`` i.i.d. points from the mixture (deterministic in ``seed``)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.choice(mixture.n_components, size=n, p=mixture.weights)
    z = rng.standard_normal((n, mixture.dim))
    out = np.empty_like(z)
    for k in range(mixture.n_components):
        idx = labels == k
        out[idx] = mixture.means[k] + z[idx] @ mixture.chol[k].T
    return out
