"""Runge-Kutta and exponential Runge-Kutta integrators for the probability flow ODE.

The ODE is integrated in reverse time ``t`` from 0 (noise) to ``T - tau``::

    dY/dt = beta(T - t) / 2 * (Y + s_t(Y))

where ``s_t`` is a (possibly perturbed) score evaluated at reverse time ``t``.
A score is any callable ``score(t_rev, x) -> array`` taking an (n, d) batch.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, DegeneracyError, DivergenceError
from .schedule import phi

__all__ = [
    "ButcherTableau",
    "ExpRKScheme",
    "ExpRKCoefficients",
    "TimeGrid",
    "EnsembleResult",
    "SCHEME_NAMES",
    "builtin_tableau",
    "get_scheme",
    "build_time_grid",
    "velocity",
    "rk_step",
    "exprk_coefficients",
    "exprk_step",
    "solve_particle",
    "solve_ensemble",
]

SCHEME_NAMES = ("RK1", "RK2", "RK3", "RK4", "ExpRK1", "ExpRK2", "ExpRK3")


@dataclass(frozen=True, eq=False)
class ButcherTableau:
    name: str
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    order: int

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        c = np.asarray(self.c, dtype=float)
        s = b.shape[0]
        if a.shape != (s, s) or c.shape != (s,):
            raise ValueError("tableau shapes must be a: (s, s), b: (s,), c: (s,)")
        if np.any(np.triu(a) != 0):
            raise ValueError("explicit tableau needs a strictly lower-triangular matrix")
        for name, val in (("a", a), ("b", b), ("c", c)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def stages(self):
        return self.b.shape[0]

    @property
    def nodes(self):
        return self.c

    @property
    def exponential(self):
        return False


_TABLEAUS = {
    "RK1": ([[0.0]], [1.0], [0.0], 1),
    "RK2": ([[0.0, 0.0], [1.0, 0.0]], [0.5, 0.5], [0.0, 1.0], 2),
    "RK3": (
        [[0.0, 0.0, 0.0], [1 / 3, 0.0, 0.0], [0.0, 2 / 3, 0.0]],
        [0.25, 0.0, 0.75],
        [0.0, 1 / 3, 2 / 3],
        3,
    ),
    "RK4": (
        [[0.0] * 4, [0.5, 0.0, 0.0, 0.0], [0.0, 0.5, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
        [1 / 6, 1 / 3, 1 / 3, 1 / 6],
        [0.0, 0.5, 0.5, 1.0],
        4,
    ),
}


def builtin_tableau(name):
    """Forward Euler, Heun, the 3-stage (1/3, 2/3) scheme, or classical RK4."""
    try:
        a, b, c, p = _TABLEAUS[name.upper()]
    except KeyError:
        raise ValueError(f"unknown tableau {name!r}; choose from {sorted(_TABLEAUS)}") from None
    return ButcherTableau(name.upper(), a, b, c, p)


@dataclass(frozen=True)
class ExpRKScheme:
    """Exponential Runge-Kutta recipe of order 1, 2 or 3 with free nodes ``c2``, ``c3``."""

    order: int
    c2: float | None = None
    c3: float | None = None
    simplified_a32: bool = False

    def __post_init__(self):
        if self.order not in (1, 2, 3):
            raise ValueError(f"exponential RK order must be 1, 2 or 3, got {self.order}")
        if self.order >= 2 and self.c2 is None:
            object.__setattr__(self, "c2", 1.0 if self.order == 2 else 1 / 3)
        if self.order == 3 and self.c3 is None:
            object.__setattr__(self, "c3", 2 / 3)
        if self.order == 2 and not 0 < self.c2 <= 1:
            raise ValueError(f"ExpRK2 needs 0 < c2 <= 1, got {self.c2}")
        if self.order == 3:
            if not 0 < self.c2 < self.c3 <= 1:
                raise ValueError(f"ExpRK3 needs 0 < c2 < c3 <= 1, got {self.c2}, {self.c3}")
            if 3 * self.c2**2 - 2 * self.c2 == 0:
                raise ValueError("ExpRK3 needs 3 c2^2 - 2 c2 != 0")

    @property
    def name(self):
        return f"ExpRK{self.order}"

    @property
    def gamma(self):
        c2, c3 = self.c2, self.c3
        return (3 * c3**2 - 2 * c3) / (3 * c2**2 - 2 * c2)

    @property
    def nodes(self):
        return np.array([0.0, self.c2, self.c3][: self.order], dtype=float)

    @property
    def stages(self):
        return self.order

    @property
    def exponential(self):
        return True


def get_scheme(name, c2=None, c3=None, simplified_a32=False):
    """Resolve a scheme name from ``SCHEME_NAMES`` to a tableau or exponential recipe."""
    if isinstance(name, (ButcherTableau, ExpRKScheme)):
        return name
    key = name.strip()
    if key.upper().startswith("EXPRK"):
        return ExpRKScheme(int(key[-1]), c2=c2, c3=c3, simplified_a32=simplified_a32)
    return builtin_tableau(key)


# -- time grid ------------------------------------------------------------

_ALIGN_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Uniform reverse-time grid over ``[0, T - tau]`` with per-step stage times.

    ``stage_times[i, j]`` is the time of stage ``j`` in step ``i``; under
    strict alignment each is an exact integer multiple of ``delta_t``.
    """

    delta_t: float
    T: float
    tau: float
    n_steps: int
    strict: bool
    t: np.ndarray
    stage_times: np.ndarray = field(repr=False)

    @property
    def H(self):
        return (self.T - self.tau) / self.n_steps

    @property
    def steps(self):
        return [(float(self.t[i]), float(self.t[i + 1] - self.t[i])) for i in range(self.n_steps)]


def _near_int(v):
    return abs(v - round(v)) <= _ALIGN_TOL * max(1.0, abs(v))


def build_time_grid(T, tau, delta_t, n_steps, scheme, strict=True):
    """Uniform grid of ``n_steps`` steps whose stage times respect the score grid.

    Under ``strict`` every step size and every stage offset ``c_j H`` must be an
    integer multiple of ``delta_t``; otherwise ``ConfigurationError`` is raised.
    """
    scheme = get_scheme(scheme)
    n_steps = int(n_steps)
    if n_steps < 1:
        raise ConfigurationError("n_steps must be >= 1")
    if not 0 <= tau < T:
        raise ConfigurationError(f"need 0 <= tau < T, got tau={tau}, T={T}")
    if delta_t <= 0:
        raise ConfigurationError("delta_t must be positive")
    nodes = scheme.nodes
    H = (T - tau) / n_steps
    if strict:
        k = H / delta_t
        if not _near_int(k):
            raise ConfigurationError(
                f"{scheme.name}: step H={H:g} is {k:g} x delta_t={delta_t:g}, "
                f"not an integer multiple (stage time t={H:g} off the score grid)"
            )
        k = round(k)
        offsets = nodes * k
        for j, off in enumerate(offsets):
            if not _near_int(off):
                raise ConfigurationError(
                    f"{scheme.name}: stage {j + 1} at t_i + {nodes[j]:g} H = t_i + {off:g} delta_t "
                    f"(first at t={nodes[j] * H:g}) is off the score grid; "
                    f"H must be a multiple of {_multiple(nodes)} delta_t"
                )
        idx = np.arange(n_steps + 1) * k
        t = idx * delta_t
        st = (idx[:-1, None] + np.rint(offsets)[None, :]) * delta_t
    else:
        t = np.arange(n_steps + 1) * H
        st = t[:-1, None] + nodes[None, :] * H
        t[-1] = T - tau
    return TimeGrid(float(delta_t), float(T), float(tau), n_steps, bool(strict), t, st)


def _multiple(nodes):
    from fractions import Fraction

    m = 1
    for c in nodes:
        m = math.lcm(m, Fraction(float(c)).limit_denominator(1000).denominator)
    return m


# -- standard Runge-Kutta -------------------------------------------------


def velocity(schedule, score, t_rev, x):
    """Probability-flow velocity ``beta(T - t)/2 * (x + score(t, x))``."""
    x = np.asarray(x, dtype=float)
    return 0.5 * schedule.beta(schedule.T - t_rev) * (x + score(t_rev, x))


def _eval_masked(fn, y):
    """Evaluate ``fn`` on finite rows only; other rows come back NaN."""
    ok = np.isfinite(y).all(axis=-1)
    if ok.all():
        return fn(y)
    out = np.full_like(y, np.nan)
    if ok.any():
        out[ok] = fn(y[ok])
    return out


def _check_finite(arr, stage):
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite state at stage {stage}", stage=stage)


def rk_step(tableau, schedule, score, t_i, H, x, stage_times=None, *, _masked=False):
    """One explicit Runge-Kutta step of size ``H`` from reverse time ``t_i``."""
    x = np.asarray(x, dtype=float)
    ts = t_i + tableau.c * H if stage_times is None else stage_times
    a, b = tableau.a, tableau.b
    ks = []
    for j in range(tableau.stages):
        y = x
        for k in range(j):
            if a[j, k] != 0.0:
                y = y + (H * a[j, k]) * ks[k]
        if _masked:
            kj = _eval_masked(lambda z, tj=ts[j]: velocity(schedule, score, tj, z), y)
        else:
            _check_finite(y, j + 1)
            kj = velocity(schedule, score, ts[j], y)
            _check_finite(kj, j + 1)
        ks.append(kj)
    out = x
    for j in range(tableau.stages):
        if b[j] != 0.0:
            out = out + (H * b[j]) * ks[j]
    if not _masked:
        _check_finite(out, tableau.stages)
    return out


# -- exponential Runge-Kutta ----------------------------------------------


@dataclass(frozen=True, eq=False)
class ExpRKCoefficients:
    """Step-dependent coefficients of one exponential RK step.

    ``e_factors[j]`` scales the state entering stage ``j``; ``e_final`` scales
    the state in the update; ``sigmas[j]`` converts the stage score to the
    noise-prediction form.
    """

    e_factors: np.ndarray
    e_final: float
    a: np.ndarray
    b: np.ndarray
    sigmas: np.ndarray
    stage_times: np.ndarray


_DEGENERACY_TOL = 1e-12


def exprk_coefficients(scheme, schedule, t_i, H, stage_times=None):
    if stage_times is None:
        stage_times = t_i + scheme.nodes * H
    stage_times = np.asarray(stage_times, dtype=float)
    t_next = t_i + H
    T = schedule.T
    s = scheme.order
    alpha_i = schedule.alpha(t_i)
    zeta_i = schedule.zeta(t_i)
    d_alpha = schedule.alpha(t_next) - alpha_i
    sig_next = schedule.sigma(T - t_next)
    e_final = math.exp(schedule.zeta(t_next) - zeta_i)
    da = np.array([schedule.alpha(tj) - alpha_i for tj in stage_times])
    sig = np.array([schedule.sigma(T - tj) for tj in stage_times])
    e_fac = np.exp(np.array([schedule.zeta(tj) for tj in stage_times]) - zeta_i)

    a = np.zeros((s, s))
    b = np.zeros(s)
    lead = sig_next * d_alpha * phi(1, d_alpha) / H
    if s == 1:
        b[0] = lead
    elif s == 2:
        if da[1] == 0.0:
            raise DegeneracyError(f"alpha increment of stage 2 vanishes at t={t_i}, H={H}")
        a[1, 0] = sig[1] * da[1] * phi(1, da[1]) / H
        b[1] = sig_next * d_alpha**2 * phi(2, d_alpha) / (da[1] * H)
        b[0] = lead - b[1]
    else:
        gamma = scheme.gamma
        denom = gamma * da[1] + da[2]
        scale = abs(gamma * da[1]) + abs(da[2])
        if da[1] == 0.0 or abs(denom) <= _DEGENERACY_TOL * scale:
            raise DegeneracyError(
                f"ExpRK3 denominators vanish at t={t_i}, H={H} (d_alpha2={da[1]}, denom={denom})"
            )
        a[1, 0] = sig[1] * da[1] * phi(1, da[1]) / H
        if scheme.simplified_a32:
            a32 = (gamma * sig[1] * da[1] ** 2 + sig[2] * da[2] ** 2) / (2.0 * da[1] * H)
        else:
            a32 = (
                gamma * sig[1] * da[1] ** 2 * phi(2, da[1]) + sig[2] * da[2] ** 2 * phi(2, da[2])
            ) / (da[1] * H)
        a[2, 1] = a32
        a[2, 0] = sig[2] * da[2] * phi(1, da[2]) / H - a32
        b[2] = sig_next * d_alpha**2 * phi(2, d_alpha) / (denom * H)
        b[1] = gamma * b[2]
        b[0] = lead - (1.0 + gamma) * b[2]
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise DegeneracyError(f"non-finite exponential RK coefficients at t={t_i}, H={H}")
    return ExpRKCoefficients(e_fac, e_final, a, b, sig, stage_times)


def exprk_step(scheme, schedule, score, t_i, H, x, stage_times=None, coefficients=None,
               *, _masked=False):
    """One exponential RK step; stages act on ``eps_t(x) = sigma(T - t) * score(t, x)``."""
    x = np.asarray(x, dtype=float)
    co = coefficients or exprk_coefficients(scheme, schedule, t_i, H, stage_times)
    ks = []
    for j in range(scheme.stages):
        y = co.e_factors[j] * x if j else x
        for k in range(j):
            if co.a[j, k] != 0.0:
                y = y + (H * co.a[j, k]) * ks[k]
        fn = lambda z, j=j: co.sigmas[j] * score(co.stage_times[j], z)  # noqa: E731
        if _masked:
            kj = _eval_masked(fn, y)
        else:
            _check_finite(y, j + 1)
            kj = fn(y)
            _check_finite(kj, j + 1)
        ks.append(kj)
    out = co.e_final * x
    for j in range(scheme.stages):
        if co.b[j] != 0.0:
            out = out + (H * co.b[j]) * ks[j]
    if not _masked:
        _check_finite(out, scheme.stages)
    return out


# -- trajectories ---------------------------------------------------------


def _step_fn(scheme, schedule, score, grid):
    if scheme.exponential:
        coefs = [
            exprk_coefficients(scheme, schedule, grid.t[i], grid.t[i + 1] - grid.t[i],
                               grid.stage_times[i])
            for i in range(grid.n_steps)
        ]

        def step(i, x, masked):
            H = grid.t[i + 1] - grid.t[i]
            return exprk_step(scheme, schedule, score, grid.t[i], H, x,
                              coefficients=coefs[i], _masked=masked)
    else:
        def step(i, x, masked):
            H = grid.t[i + 1] - grid.t[i]
            return rk_step(scheme, schedule, score, grid.t[i], H, x,
                           stage_times=grid.stage_times[i], _masked=masked)
    return step


def _check_alignment(grid):
    if grid.strict:
        ratio = grid.stage_times / grid.delta_t
        bad = np.abs(ratio - np.rint(ratio)) > _ALIGN_TOL * np.maximum(1.0, np.abs(ratio))
        assert not bad.any(), f"stage times off the score grid: {grid.stage_times[bad][:3]}"


def _prepare(score, grid):
    prep = getattr(score, "prepare", None)
    if prep is not None:
        prep(np.unique(grid.stage_times))


def solve_particle(scheme, grid, schedule, score, x0, checkpoints=None):
    """Integrate a state (or batch) over the whole grid.

    Raises ``DivergenceError`` (carrying the step index) on any non-finite
    value. With ``checkpoints`` (grid step indices) returns
    ``(terminal, {index: state})``.
    """
    scheme = get_scheme(scheme)
    if __debug__:
        _check_alignment(grid)
    _prepare(score, grid)
    step = _step_fn(scheme, schedule, score, grid)
    x = np.asarray(x0, dtype=float)
    wanted = set(checkpoints or ())
    saved = {0: x.copy()} if 0 in wanted else {}
    for i in range(grid.n_steps):
        try:
            x = step(i, x, False)
        except DivergenceError as exc:
            exc.step = i
            raise DivergenceError(f"step {i}: {exc}", stage=exc.stage, step=i) from None
        if i + 1 in wanted:
            saved[i + 1] = x.copy()
    return (x, saved) if checkpoints is not None else x


@dataclass(eq=False)
class EnsembleResult:
    """Terminal states (NaN rows for diverged particles) plus divergence bookkeeping."""

    x: np.ndarray
    diverged: np.ndarray
    diverged_step: np.ndarray
    checkpoints: dict = field(default_factory=dict)

    @property
    def n_diverged(self):
        return int(self.diverged.sum())

    @property
    def n_ok(self):
        return int(self.x.shape[0] - self.n_diverged)


DEFAULT_CHUNK = 1 << 15


def solve_ensemble(scheme, grid, schedule, score, x0, checkpoints=None, n_jobs=1,
                   chunk_size=DEFAULT_CHUNK):
    """Integrate an ensemble of shape (J, d), isolating diverged particles.

    Particles are processed in fixed-size chunks so the result does not
    depend on ``n_jobs``. A particle whose state becomes non-finite is
    frozen as NaN and recorded with the step at which it failed.
    """
    scheme = get_scheme(scheme)
    if __debug__:
        _check_alignment(grid)
    _prepare(score, grid)
    step = _step_fn(scheme, schedule, score, grid)
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim != 2:
        raise ValueError(f"ensemble must have shape (J, d), got {x0.shape}")
    J = x0.shape[0]
    wanted = sorted(set(checkpoints or ()))
    out = np.empty_like(x0)
    failed_at = np.full(J, -1, dtype=np.int64)
    saved = {i: np.empty_like(x0) for i in wanted}
    bounds = [(lo, min(lo + chunk_size, J)) for lo in range(0, J, chunk_size)]

    def work(lo_hi):
        lo, hi = lo_hi
        x = x0[lo:hi].copy()
        fail = failed_at[lo:hi]
        if 0 in saved:
            saved[0][lo:hi] = x
        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(grid.n_steps):
                x = step(i, x, True)
                bad = ~np.isfinite(x).all(axis=1)
                newly = bad & (fail < 0)
                if newly.any():
                    fail[newly] = i
                    x[newly] = np.nan
                if i + 1 in saved:
                    saved[i + 1][lo:hi] = x
        out[lo:hi] = x

    if n_jobs == 1 or len(bounds) == 1:
        for bh in bounds:
            work(bh)
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            list(pool.map(work, bounds))
    return EnsembleResult(out, failed_at >= 0, failed_at, saved)
