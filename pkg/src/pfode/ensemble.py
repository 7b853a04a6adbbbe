"""Seeded initial ensembles drawn from the standard Gaussian."""
from __future__ import annotations

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from .solver import DEFAULT_CHUNK

__all__ = ["sample_initial_ensemble", "INIT_METHODS"]

INIT_METHODS = ("iid", "stratified")

# keeps the inverse normal CDF finite if a uniform draw lands on 0 exactly
_U_MIN = 2.0**-60


def sample_initial_ensemble(seed, J, d, method="iid", shard_size=DEFAULT_CHUNK):
    """``J`` standard normal vectors in ``d`` dimensions.

    ``method="iid"`` fills shard ``k`` (rows ``k*shard_size`` onwards) from the
    substream ``SeedSequence([seed, k])``, so the ensemble is the same however
    shards are later distributed over threads.

    ``method="stratified"`` draws a scrambled Latin hypercube in ``[0, 1)^d``
    from ``SeedSequence([seed])`` and maps it through the normal quantile. Each
    coordinate then has exactly one particle in every ``1/J`` quantile bin,
    which removes most of the Monte Carlo noise in ensemble means.
    """
    J, d = int(J), int(d)
    if J < 1 or d < 1:
        raise ValueError(f"need J >= 1 and d >= 1, got J={J}, d={d}")
    seed = int(seed)
    if method == "iid":
        out = np.empty((J, d))
        for k, lo in enumerate(range(0, J, shard_size)):
            hi = min(lo + shard_size, J)
            rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
            out[lo:hi] = rng.standard_normal((hi - lo, d))
        return out
    if method == "stratified":
        rng = np.random.default_rng(np.random.SeedSequence([seed]))
        u = qmc.LatinHypercube(d, scramble=True, rng=rng).random(J)
        return ndtri(np.clip(u, _U_MIN, 1.0 - _U_MIN))
    raise ValueError(f"unknown init method {method!r}; choose from {INIT_METHODS}")
