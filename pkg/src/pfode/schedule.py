"""Variance schedules of the forward noising process and derived time changes.

Forward time ``t`` runs from data (``t = 0``) to noise (``t = T``); reverse time
``t_rev = T - t`` runs the other way and is the time variable of the samplers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import DomainError, SingularityError

__all__ = ["VarianceSchedule", "phi", "PHI_SERIES_SWITCH", "PHI_SERIES_TERMS"]

PHI_SERIES_SWITCH = 0.5
PHI_SERIES_TERMS = 16

_KINDS = ("constant_ou", "linear")


@dataclass(frozen=True)
class VarianceSchedule:
    """Noise-injection rate ``beta(t)`` on ``[0, T]``.

    ``kind="constant_ou"`` is the Ornstein-Uhlenbeck process (``beta = 2``);
    ``kind="linear"`` interpolates from ``beta_min`` to ``beta_max``.
    """

    kind: str = "constant_ou"
    T: float = 16.0
    beta_min: float | None = None
    beta_max: float | None = None

    def __post_init__(self):
        kind = self.kind.lower().replace("-", "_")
        if kind in ("constantou", "ou"):
            kind = "constant_ou"
        if kind not in _KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {_KINDS}")
        object.__setattr__(self, "kind", kind)
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ValueError(f"horizon T must be positive and finite, got {self.T}")
        if kind == "linear":
            if self.beta_min is None or self.beta_max is None:
                raise ValueError("linear schedule needs beta_min and beta_max")
            if not 0 < self.beta_min <= self.beta_max:
                raise ValueError(
                    f"need 0 < beta_min <= beta_max, got {self.beta_min}, {self.beta_max}"
                )

    @classmethod
    def constant_ou(cls, T=16.0):
        return cls("constant_ou", T)

    @classmethod
    def linear(cls, beta_min=1e-4, beta_max=0.02, T=2000.0):
        return cls("linear", T, beta_min, beta_max)

    # -- helpers ---------------------------------------------------------

    def _check(self, t, name="t"):
        t = np.asarray(t, dtype=float)
        slack = 1e-12 * self.T
        if np.any(~np.isfinite(t)) or np.any(t < -slack) or np.any(t > self.T + slack):
            raise DomainError(f"{name}={t} outside [0, {self.T}]")
        t = np.clip(t, 0.0, self.T)
        return t if t.ndim else float(t)

    def _int_beta(self, t):
        """Integral of beta over [0, t]."""
        if self.kind == "constant_ou":
            return 2.0 * t
        return t * self.beta_min + t * t * (self.beta_max - self.beta_min) / (2.0 * self.T)

    # -- forward-time quantities ----------------------------------------

    def beta(self, t):
        t = self._check(t)
        if self.kind == "constant_ou":
            return np.full_like(t, 2.0) if isinstance(t, np.ndarray) else 2.0
        return self.beta_min + (t / self.T) * (self.beta_max - self.beta_min)

    def lam(self, t):
        """Signal decay factor ``exp(-1/2 int_0^t beta)``."""
        t = self._check(t)
        return np.exp(-0.5 * self._int_beta(t))

    def sigma(self, t):
        """Noise scale ``sqrt(1 - lam(t)**2)``, computed without cancellation near 0."""
        t = self._check(t)
        return np.sqrt(-np.expm1(-self._int_beta(t)))

    def log_sigma(self, t):
        t = self._check(t)
        return 0.5 * np.log(-np.expm1(-self._int_beta(t)))

    # -- reverse-time quantities ----------------------------------------

    def zeta(self, t_rev):
        """Half the integral of beta over ``[T - t_rev, T]``."""
        t_rev = self._check(t_rev, "t_rev")
        if self.kind == "constant_ou":
            return 1.0 * t_rev
        T = self.T
        s = T - t_rev
        return 0.5 * (
            self.beta_min * t_rev
            + (self.beta_max - self.beta_min) * (T * T - s * s) / (2.0 * T)
        )

    def alpha(self, t_rev):
        """Half-log signal-to-noise time change ``zeta(t_rev) - log sigma(T - t_rev)``.

        Diverges at ``t_rev = T`` where the noise scale vanishes; that point is
        refused rather than clamped.
        """
        t_rev = self._check(t_rev, "t_rev")
        s = self.T - np.asarray(t_rev)
        if np.any(s <= 0):
            raise SingularityError(f"alpha is singular at t_rev = T = {self.T}")
        return self.zeta(t_rev) - self.log_sigma(s)

    def dalpha_dt(self, t_rev):
        """Analytic derivative ``beta(T - t_rev) / (2 sigma(T - t_rev)**2)``."""
        s = self.T - np.asarray(self._check(t_rev, "t_rev"))
        return self.beta(s) / (2.0 * self.sigma(s) ** 2)


def _phi_series(k, h):
    h = np.asarray(h, dtype=float)
    out = np.zeros_like(h)
    # Horner on sum_j h^j / (j + k)!
    for j in reversed(range(PHI_SERIES_TERMS)):
        out = out * h + 1.0 / math.factorial(j + k)
    return out


def _phi_closed(k, h):
    em1 = np.expm1(h)
    if k == 1:
        return em1 / h
    if k == 2:
        return (em1 - h) / (h * h)
    return (em1 - h - 0.5 * h * h) / (h * h * h)


def phi(k, h):
    """Exponential-integrator kernel ``phi_k(h) = int_0^1 x^(k-1)/(k-1)! e^(h(1-x)) dx``.

    Supports ``k`` in {1, 2, 3}. Uses the closed form away from zero and a
    truncated Taylor series for ``|h| < PHI_SERIES_SWITCH``.
    """
    if k not in (1, 2, 3):
        raise ValueError(f"phi_k only implemented for k in {{1, 2, 3}}, got {k}")
    h_arr = np.asarray(h, dtype=float)
    small = np.abs(h_arr) < PHI_SERIES_SWITCH
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(small, _phi_series(k, h_arr), _phi_closed(k, np.where(small, 1.0, h_arr)))
    return out if out.ndim else float(out)
