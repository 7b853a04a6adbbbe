"""Experiment configuration, orchestration and CSV output."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .ensemble import INIT_METHODS, sample_initial_ensemble
from .exceptions import ConfigurationError, InsufficientDataError
from .metrics import (
    ErrorReport,
    default_noise_floor,
    fit_order,
    kde_grid,
    kde_on_grid,
    rel_cov_error,
    rel_mean_error,
    silverman_bandwidth,
    tv_error,
)
from .schedule import VarianceSchedule
from .solver import SCHEME_NAMES, build_time_grid, get_scheme, solve_ensemble
from .target import (
    DEFAULT_MIXTURE,
    GaussianMixture,
    ScoreField,
    marginal_density_first_dim,
    moments,
    random_mixture,
)

__all__ = [
    "ExperimentConfig",
    "load_config",
    "sample_initial_ensemble",
    "run_single",
    "run_convergence_study",
    "run_score_error_study",
    "StudyResult",
    "CSV_COLUMNS",
    "write_csv",
    "write_manifest",
    "manifest_path",
]

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
MAX_DIVERGED_FRACTION = 1e-3

CSV_COLUMNS = (
    "scheme", "d", "n_steps", "H", "eps_score", "J", "tv_error", "rel_mean_error",
    "rel_cov_error", "fitted_order", "runtime_s", "seed",
)


# -- configuration --------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ScheduleSpec(_Strict):
    kind: Literal["constant_ou", "linear"] = "constant_ou"
    T: float = Field(16.0, gt=0)
    beta_min: Optional[float] = None
    beta_max: Optional[float] = None

    def build(self):
        return VarianceSchedule(self.kind, self.T, self.beta_min, self.beta_max)


class GridSpec(_Strict):
    N: int = Field(512, ge=1)
    tau: float = Field(0.0, ge=0)
    n_steps: list[int] = Field(default_factory=lambda: [8, 16, 32, 64, 128], min_length=1)
    strict_alignment: bool = True


class ComponentsSpec(_Strict):
    weights: list[float]
    means: list
    covs: list


class RandomMixtureSpec(_Strict):
    d: int = Field(ge=1)
    K: int = Field(5, ge=1)
    seed: int = 0


class MixtureSpec(_Strict):
    components: Optional[ComponentsSpec] = None
    random: Optional[RandomMixtureSpec] = None
    # shift to zero mean; removes the lambda_T * m mismatch of the N(0, I) start
    center: bool = False

    @model_validator(mode="after")
    def _one_of(self):
        if (self.components is None) == (self.random is None):
            raise ValueError("mixture needs exactly one of 'components' or 'random'")
        return self

    def build(self):
        if self.random is not None:
            mix = random_mixture(self.random.d, self.random.K, self.random.seed)
        else:
            mix = GaussianMixture.from_dict(self.components.model_dump())
        return mix.centered() if self.center else mix


class OrderMatching(_Strict):
    """``eps = c * (H / T)^p`` with ``p`` the scheme order (``c * H^p`` if ``normalize`` is off)."""

    rule: Literal["order-matching"] = "order-matching"
    c: float = Field(1.0, gt=0)
    normalize: bool = True


class KDESpec(_Strict):
    rule: Literal["silverman", "normal"] = "silverman"
    n_points: int = Field(2048, ge=16)


class ExperimentConfig(_Strict):
    version: Literal[1] = CONFIG_VERSION
    schedule: ScheduleSpec = Field(default_factory=ScheduleSpec)
    grid: GridSpec = Field(default_factory=GridSpec)
    schemes: list[str] = Field(default_factory=lambda: ["RK4"], min_length=1)
    exprk_c2: Optional[float] = None
    exprk_c3: Optional[float] = None
    simplified_a32: bool = False
    mixture: MixtureSpec = Field(
        default_factory=lambda: MixtureSpec(components=ComponentsSpec(**DEFAULT_MIXTURE))
    )
    eps_score: Union[float, list[float], OrderMatching] = 1e-6
    n_particles: int = Field(200_000, ge=100)
    init_sampling: Literal[INIT_METHODS] = "iid"
    seed: int = Field(0, ge=0)
    noise_floor: Optional[float] = Field(None, ge=0)
    order_metric: Literal["rel_mean_error", "rel_cov_error", "tv_error"] = "rel_mean_error"
    output: Optional[str] = None
    kde: KDESpec = Field(default_factory=KDESpec)

    @model_validator(mode="after")
    def _check(self):
        for name in self.schemes:
            if name not in SCHEME_NAMES:
                raise ValueError(f"unknown scheme {name!r}; choose from {SCHEME_NAMES}")
        try:
            sched = self.schedule.build()
            self.mixture.build()
        except (ValueError, ArithmeticError) as exc:
            raise ValueError(str(exc)) from None
        if self.grid.tau >= sched.T:
            raise ValueError(f"tau={self.grid.tau} must be below T={sched.T}")
        for name in self.schemes:
            scheme = self.scheme(name)
            if scheme.exponential and self.grid.tau <= 0:
                raise ValueError(f"{name} needs tau > 0: alpha is singular at t = T")
            for n in self.grid.n_steps:
                try:
                    build_time_grid(sched.T, self.grid.tau, self.delta_t, n, scheme,
                                    strict=self.grid.strict_alignment)
                except ConfigurationError as exc:
                    raise ValueError(f"n_steps={n}: {exc}") from None
        return self

    @property
    def delta_t(self):
        return self.schedule.T / self.grid.N

    def scheme(self, name):
        return get_scheme(name, self.exprk_c2, self.exprk_c3, self.simplified_a32)

    def floor(self):
        if self.noise_floor is not None:
            return self.noise_floor
        return default_noise_floor(self.n_particles)

    def eps_for(self, name, n_steps):
        """Score error for a convergence run of ``name`` with ``n_steps`` steps."""
        eps = self.eps_score
        if isinstance(eps, OrderMatching):
            H = (self.schedule.T - self.grid.tau) / n_steps
            if eps.normalize:
                H = H / self.schedule.T
            return eps.c * H ** self.scheme(name).order
        if isinstance(eps, list):
            raise ConfigurationError("a convergence study needs a single eps_score or a rule")
        return float(eps)


def load_config(source, overrides=None):
    """Parse a JSON config (path, JSON text or dict) and apply dotted-key overrides.

    Any problem is raised as ``ConfigurationError``.
    """
    if isinstance(source, dict):
        raw = json.loads(json.dumps(source))
    else:
        text = str(source)
        path = Path(text)
        try:
            if not text.lstrip().startswith("{"):
                text = path.read_text()
            raw = json.loads(text)
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {source}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a JSON object")
    for key, value in (overrides or {}).items():
        node = raw
        *head, last = key.split(".")
        for part in head:
            node = node.setdefault(part, {})
        node[last] = value
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigurationError(_format_validation(exc)) from None


def _format_validation(exc):
    lines = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "config"
        lines.append(f"{where}: {err['msg']}")
    return "invalid config: " + "; ".join(lines)


# -- runs -----------------------------------------------------------------


class _Context:
    """Objects shared by all runs of one study (mixture, schedule, initial ensemble)."""

    def __init__(self, config, n_jobs=1):
        self.config = config
        self.n_jobs = n_jobs
        self.schedule = config.schedule.build()
        self.mixture = config.mixture.build()
        self._x0 = None
        tau = config.grid.tau
        self.mean, self.cov = moments(self.mixture, self.schedule, tau)

    @property
    def x0(self):
        if self._x0 is None:
            c = self.config
            self._x0 = sample_initial_ensemble(c.seed, c.n_particles, self.mixture.dim,
                                               method=c.init_sampling)
        return self._x0


def run_single(config, scheme, n_steps, eps, n_jobs=1, _ctx=None):
    """Integrate the configured ensemble once and measure it against the exact marginal at ``tau``."""
    ctx = _ctx or _Context(config, n_jobs)
    c = config
    sched = ctx.schedule
    sch = c.scheme(scheme)
    grid = build_time_grid(sched.T, c.grid.tau, c.delta_t, n_steps, sch,
                           strict=c.grid.strict_alignment)
    report = ErrorReport(sch.name, ctx.mixture.dim, int(n_steps), grid.H, float(eps),
                         c.n_particles, c.seed)
    field = ScoreField(ctx.mixture, sched, float(eps))
    t0 = time.perf_counter()
    res = solve_ensemble(sch, grid, sched, field, ctx.x0, n_jobs=n_jobs)
    report.n_diverged = res.n_diverged
    ok = res.x[~res.diverged]
    if res.n_diverged > MAX_DIVERGED_FRACTION * c.n_particles:
        steps = res.diverged_step[res.diverged]
        report.failed = True
        report.message = (
            f"{res.n_diverged} of {c.n_particles} particles diverged "
            f"(first at step {int(steps.min())}, median step {int(np.median(steps))})"
        )
        log.warning("%s n_steps=%d: %s", sch.name, n_steps, report.message)
    if ok.shape[0] >= 2:
        report.rel_mean_error = rel_mean_error(ok, ctx.mean)
        report.rel_cov_error = rel_cov_error(ok, ctx.cov)
        report.tv_error = _tv_first_marginal(ok[:, 0], ctx, c.kde)
    report.runtime = time.perf_counter() - t0
    return report


def _tv_first_marginal(x1, ctx, kde):
    h = silverman_bandwidth(x1, kde.rule)
    g = kde_grid(x1, h, kde.n_points)
    est = kde_on_grid(x1, g, h)
    exact = marginal_density_first_dim(ctx.mixture, ctx.schedule, ctx.config.grid.tau, g)
    return tv_error(est, exact, g)


class StudyResult:
    """Per-run reports plus one fitted slope per scheme (NaN when not enough points clear the floor)."""

    def __init__(self, kind, reports, slopes, config):
        self.kind = kind
        self.reports = reports
        self.slopes = slopes
        self.config = config

    @property
    def failed(self):
        return any(r.failed for r in self.reports)

    def rows(self, timing=True):
        out = [_row(r, None, timing) for r in self.reports]
        for name, slope in self.slopes.items():
            mine = [r for r in self.reports if r.scheme == name]
            total = sum(r.runtime for r in mine)
            out.append({
                "scheme": name, "d": mine[0].d if mine else "", "n_steps": "", "H": "",
                "eps_score": "", "J": self.config.n_particles, "tv_error": "",
                "rel_mean_error": "", "rel_cov_error": "", "fitted_order": _fmt(slope),
                "runtime_s": _fmt(total) if timing else "", "seed": self.config.seed,
            })
        return out


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _row(r, slope, timing):
    return {
        "scheme": r.scheme, "d": r.d, "n_steps": r.n_steps, "H": _fmt(r.H),
        "eps_score": _fmt(r.eps_score), "J": r.n_particles, "tv_error": _fmt(r.tv_error),
        "rel_mean_error": _fmt(r.rel_mean_error), "rel_cov_error": _fmt(r.rel_cov_error),
        "fitted_order": _fmt(slope), "runtime_s": _fmt(r.runtime) if timing else "",
        "seed": r.seed,
    }


def _slope(points, floor, label):
    try:
        return fit_order(points, floor)
    except InsufficientDataError as exc:
        log.warning("%s: no slope fitted (%s)", label, exc)
        return math.nan


def run_convergence_study(config, n_jobs=1, runner=None):
    """One run per (scheme, n_steps) with eps from the config; slope of the order metric against H.

    ``runner(config, scheme, n_steps, eps)`` replaces the solver run (for tests).
    """
    if len(config.grid.n_steps) < 3:
        raise ConfigurationError("a convergence study needs at least 3 n_steps values")
    ctx = None if runner is not None else _Context(config, n_jobs)
    run = runner or (lambda c, s, n, e: run_single(c, s, n, e, n_jobs, _ctx=ctx))
    reports, slopes = [], {}
    for name in config.schemes:
        mine = []
        for n in config.grid.n_steps:
            r = run(config, name, n, config.eps_for(name, n))
            log.info("%s n_steps=%d %s=%.3e", r.scheme, n, config.order_metric,
                     getattr(r, config.order_metric))
            mine.append(r)
        pts = [(r.H, getattr(r, config.order_metric)) for r in mine if not r.failed]
        slopes[mine[0].scheme] = _slope(pts, config.floor(), name)
        reports.extend(mine)
    return StudyResult("convergence", reports, slopes, config)


def run_score_error_study(config, n_jobs=1, runner=None):
    """One run per eps value at the largest configured ``n_steps``; slope of the metric against eps.

    An ``eps = 0`` entry is run as a floor reference and left out of the fit.
    """
    eps_list = config.eps_score
    if not isinstance(eps_list, list):
        raise ConfigurationError("a score-error study needs eps_score to be a list")
    if sum(e > 0 for e in eps_list) < 3:
        raise ConfigurationError("a score-error study needs at least 3 positive eps values")
    n = max(config.grid.n_steps)
    ctx = None if runner is not None else _Context(config, n_jobs)
    run = runner or (lambda c, s, n_, e: run_single(c, s, n_, e, n_jobs, _ctx=ctx))
    reports, slopes = [], {}
    for name in config.schemes:
        mine = [run(config, name, n, float(e)) for e in eps_list]
        pts = [(r.eps_score, getattr(r, config.order_metric))
               for r in mine if r.eps_score > 0 and not r.failed]
        slopes[mine[0].scheme] = _slope(pts, config.floor(), name)
        reports.extend(mine)
    return StudyResult("score-error", reports, slopes, config)


# -- output ---------------------------------------------------------------


def write_csv(rows, path=None):
    """Write rows in the fixed column order; returns the CSV text."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    text = buf.getvalue()
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


def manifest_path(csv_path):
    p = Path(csv_path)
    return p.with_name(p.stem + ".manifest.txt")


def write_manifest(path, config, command, extra=None):
    """Text manifest echoing the resolved config next to the CSV."""
    import platform

    import scipy

    from . import __version__

    lines = [
        f"command: {command}",
        f"package_version: {__version__}",
        f"python: {platform.python_version()}",
        f"numpy: {np.__version__}",
        f"scipy: {scipy.__version__}",
    ]
    for k, v in (extra or {}).items():
        lines.append(f"{k}: {v}")
    lines.append("resolved_config:")
    lines.append(json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")
    return path
