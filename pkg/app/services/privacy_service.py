import logging

import numpy as np

from app.core.errors import RejectedInputError
from app.models.nn import GradientVector
from app.schemas.experiment import DpMode, DpPolicy

logger = logging.getLogger(__name__)

CLIP_MODES = ("value", "norm")


def add_gaussian_noise(g: GradientVector, sigma: float, rng: np.random.Generator) -> GradientVector:
    """Add N(0, sigma^2) to every coordinate."""
    if sigma < 0:
        raise RejectedInputError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return g
    return g.with_values(g.values + rng.normal(0.0, sigma, size=len(g)))


def clip(g: GradientVector, bound: float, mode: str = "value") -> GradientVector:
    """
    Clip an update.

    Args:
        g: Update to clip
        bound: Positive clipping bound
        mode: "value" clamps each coordinate to [-bound, bound];
              "norm" rescales by min(1, bound / ||g||_2)

    Returns:
        Clipped update with the same fingerprint
    """
    if bound <= 0:
        raise RejectedInputError(f"clip bound must be > 0, got {bound}")
    if mode == "value":
        return g.with_values(np.clip(g.values, -bound, bound))
    if mode == "norm":
        norm = g.norm()
        if norm <= bound:
            return g
        return g.with_values(g.values * (bound / norm))
    raise RejectedInputError(f"unknown clip mode '{mode}', expected one of {CLIP_MODES}")


def prune(g: GradientVector, sparsity: float) -> GradientVector:
    """Zero the floor(sparsity * len) smallest-magnitude coordinates."""
    if not 0 <= sparsity < 1:
        raise RejectedInputError(f"sparsity must lie in [0, 1), got {sparsity}")
    n_pruned = int(np.floor(sparsity * len(g)))
    if n_pruned == 0:
        return g
    # stable sort: equal magnitudes keep index order, so lower indices go first
    order = np.argsort(np.abs(g.values), kind="stable")
    values = g.values.copy()
    values[order[:n_pruned]] = 0.0
    return g.with_values(values)


def apply_policy(g: GradientVector, policy: DpPolicy, rng: np.random.Generator) -> GradientVector:
    if policy.mode == DpMode.none:
        return g
    if policy.mode == DpMode.gaussian_noise:
        return add_gaussian_noise(g, policy.sigma, rng)
    if policy.mode == DpMode.value_clip:
        return clip(g, policy.clip_bound, "value")
    if policy.mode == DpMode.norm_clip:
        return clip(g, policy.clip_bound, "norm")
    if policy.mode == DpMode.prune:
        return prune(g, policy.sparsity)
    raise RejectedInputError(f"unsupported dp mode {policy.mode}")
