"""Probability flow ODE samplers with standard and exponential Runge-Kutta schemes,
exact Gaussian-mixture scores, and a convergence-study harness."""

__version__ = "0.1.0"

from .estimator import ProbabilityFlowSampler
from .harness import (
    ExperimentConfig,
    load_config,
    run_convergence_study,
    run_score_error_study,
    run_single,
)
from .metrics import ErrorReport, fit_order, kde_on_grid, silverman_bandwidth, tv_error
from .schedule import VarianceSchedule, phi
from .solver import (
    ExpRKScheme,
    build_time_grid,
    builtin_tableau,
    exprk_step,
    get_scheme,
    rk_step,
    solve_ensemble,
    solve_particle,
)
from .target import GaussianMixture, ScoreField, default_mixture, random_mixture

__all__ = [
    "ProbabilityFlowSampler",
    "ExperimentConfig",
    "load_config",
    "run_single",
    "run_convergence_study",
    "run_score_error_study",
    "ErrorReport",
    "fit_order",
    "kde_on_grid",
    "silverman_bandwidth",
    "tv_error",
    "VarianceSchedule",
    "phi",
    "ExpRKScheme",
    "build_time_grid",
    "builtin_tableau",
    "exprk_step",
    "get_scheme",
    "rk_step",
    "solve_ensemble",
    "solve_particle",
    "GaussianMixture",
    "ScoreField",
    "default_mixture",
    "random_mixture",
]
