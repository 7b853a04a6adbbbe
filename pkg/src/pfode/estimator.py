"""Estimator-style front end: ``fit`` resolves the problem, ``transform`` integrates noise."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .ensemble import sample_initial_ensemble
from .schedule import VarianceSchedule
from .solver import DEFAULT_CHUNK, build_time_grid, get_scheme, solve_ensemble
from .target import GaussianMixture, ScoreField, default_mixture

__all__ = ["ProbabilityFlowSampler"]


class ProbabilityFlowSampler(TransformerMixin, BaseEstimator):
    """Transport standard Gaussian noise to a Gaussian-mixture target along the probability flow ODE.

    Parameters
    ----------
    mixture : GaussianMixture or dict, optional
        Target distribution; defaults to the package's 1-D three-mode mixture.
    schedule : VarianceSchedule, optional
        Forward noising schedule; defaults to the Ornstein-Uhlenbeck one on ``[0, 16]``.
    scheme : str
        One of ``RK1`` to ``RK4`` or ``ExpRK1`` to ``ExpRK3``.
    n_steps : int
        Number of solver steps over ``[0, T - tau]``.
    tau : float
        Early-stop margin; exponential schemes need ``tau > 0``.
    n_grid : int
        Size ``N`` of the score grid, ``delta_t = T / N``.
    eps_score : float
        Amplitude of the synthetic score error.
    strict_alignment : bool
        Refuse grids whose stage times fall off the score grid.
    exprk_c2, exprk_c3 : float, optional
        Exponential RK nodes.
    simplified_a32 : bool
        Use the dominant-term ``a32`` of the third-order exponential scheme.
    n_jobs : int
        Worker threads; never changes the output.
    chunk_size : int
        Particles per work unit.

    Attributes
    ----------
    mixture_, schedule_, scheme_, grid_, field_ : resolved components
    n_features_in_ : int
    """

    def __init__(self, mixture=None, schedule=None, scheme="RK4", n_steps=128, tau=0.0,
                 n_grid=512, eps_score=0.0, strict_alignment=True, exprk_c2=None,
                 exprk_c3=None, simplified_a32=False, n_jobs=1, chunk_size=DEFAULT_CHUNK):
        self.mixture = mixture
        self.schedule = schedule
        self.scheme = scheme
        self.n_steps = n_steps
        self.tau = tau
        self.n_grid = n_grid
        self.eps_score = eps_score
        self.strict_alignment = strict_alignment
        self.exprk_c2 = exprk_c2
        self.exprk_c3 = exprk_c3
        self.simplified_a32 = simplified_a32
        self.n_jobs = n_jobs
        self.chunk_size = chunk_size

    def fit(self, X=None, y=None):
        """Resolve mixture, schedule, scheme and grid. ``X`` only fixes/checks the dimension."""
        mix = self.mixture if self.mixture is not None else default_mixture()
        if isinstance(mix, dict):
            mix = GaussianMixture.from_dict(mix)
        sched = self.schedule if self.schedule is not None else VarianceSchedule.constant_ou(16.0)
        if isinstance(sched, dict):
            sched = VarianceSchedule(**sched)
        if int(self.n_grid) < 1:
            raise ValueError(f"n_grid must be positive, got {self.n_grid}")
        if X is not None:
            X = check_array(X, ensure_all_finite=True)
            if X.shape[1] != mix.dim:
                raise ValueError(f"X has {X.shape[1]} features, the target has {mix.dim}")
        self.mixture_ = mix
        self.schedule_ = sched
        self.scheme_ = get_scheme(self.scheme, self.exprk_c2, self.exprk_c3, self.simplified_a32)
        if self.scheme_.exponential and not self.tau > 0:
            raise ValueError("exponential schemes need tau > 0 (alpha is singular at t = T)")
        self.grid_ = build_time_grid(sched.T, float(self.tau), sched.T / int(self.n_grid),
                                     self.n_steps, self.scheme_, strict=self.strict_alignment)
        self.field_ = ScoreField(mix, sched, float(self.eps_score))
        self.n_features_in_ = mix.dim
        return self

    def integrate(self, X, checkpoints=None):
        """Full ``EnsembleResult`` (terminal states plus divergence bookkeeping)."""
        check_is_fitted(self, "grid_")
        X = check_array(X, ensure_all_finite=True)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return solve_ensemble(self.scheme_, self.grid_, self.schedule_, self.field_, X,
                              checkpoints=checkpoints, n_jobs=self.n_jobs,
                              chunk_size=self.chunk_size)

    def transform(self, X):
        """Terminal states at reverse time ``T - tau``; diverged particles come back as NaN rows."""
        return self.integrate(X).x

    def sample(self, n, random_state=0, method="iid"):
        """Draw ``n`` noise vectors and push them through the flow."""
        check_is_fitted(self, "grid_")
        return self.transform(sample_initial_ensemble(random_state, n, self.n_features_in_,
                                                      method=method))
