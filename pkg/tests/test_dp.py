"""
Tests for update obfuscation: Gaussian noise, clipping, pruning.
"""

import numpy as np
import pytest

from app.core.errors import RejectedInputError
from app.models.nn import GradientVector
from app.schemas.experiment import DpMode, DpPolicy
from app.services.privacy_service import add_gaussian_noise, apply_policy, clip, prune

FP = "f" * 64


def _vec(values):
    return GradientVector(np.asarray(values, dtype=np.float64), FP)


def test_zero_sigma_is_identity():
    """Test sigma = 0 returns the input unchanged."""
    g = _vec([1.0, -2.0, 3.0])
    out = add_gaussian_noise(g, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(out.values, g.values)


def test_noise_statistics():
    """Test the added noise has mean 0 and std sigma."""
    sigma = 0.1
    g = GradientVector(np.zeros(1_000_000), FP)
    noise = add_gaussian_noise(g, sigma, np.random.default_rng(1)).values
    assert abs(noise.mean()) < 4 * sigma / 1000
    assert abs(noise.std() - sigma) < 0.01 * sigma


def test_noise_is_seeded():
    """Test same seed and input give the same output."""
    g = _vec(np.linspace(-1, 1, 50))
    first = add_gaussian_noise(g, 0.2, np.random.default_rng(7))
    second = add_gaussian_noise(g, 0.2, np.random.default_rng(7))
    np.testing.assert_array_equal(first.values, second.values)
    assert first.spec_fingerprint == FP


def test_negative_sigma_rejected():
    """Test sigma must be non-negative."""
    with pytest.raises(RejectedInputError):
        add_gaussian_noise(_vec([1.0]), -0.1, np.random.default_rng(0))


def test_value_clip():
    """Test each coordinate is clamped to the bound."""
    np.testing.assert_array_equal(clip(_vec([1.2, -0.3]), 0.8, "value").values, [0.8, -0.3])


def test_norm_clip_rescales():
    """Test norm clipping scales [3, 4] to unit length."""
    np.testing.assert_allclose(clip(_vec([3.0, 4.0]), 1.0, "norm").values, [0.6, 0.8])


def test_norm_clip_within_bound_is_identity():
    """Test updates already inside the ball are untouched."""
    g = _vec([0.1, 0.2])
    np.testing.assert_array_equal(clip(g, 1.0, "norm").values, g.values)


def test_clip_rejects_bad_arguments():
    """Test non-positive bounds and unknown modes are refused."""
    with pytest.raises(RejectedInputError):
        clip(_vec([1.0]), 0.0)
    with pytest.raises(RejectedInputError):
        clip(_vec([1.0]), 1.0, "elementwise")


def test_value_clip_never_increases_max_norm():
    """Test the infinity norm is bounded after value clipping."""
    g = _vec(np.random.default_rng(2).normal(scale=3.0, size=200))
    clipped = clip(g, 0.5, "value")
    assert np.max(np.abs(clipped.values)) <= min(0.5, np.max(np.abs(g.values)))


def test_prune_zeroes_smallest_magnitudes():
    """Test the two smallest magnitudes are zeroed."""
    np.testing.assert_array_equal(prune(_vec([0.5, -0.1, 0.01, -0.9]), 0.5).values, [0.5, 0.0, 0.0, -0.9])


def test_prune_zero_sparsity_is_identity():
    """Test sparsity 0 keeps every coordinate."""
    g = _vec([0.3, -0.2, 0.0])
    np.testing.assert_array_equal(prune(g, 0.0).values, g.values)


def test_prune_ties_prefer_lower_index():
    """Test equal magnitudes are pruned lowest index first."""
    np.testing.assert_array_equal(prune(_vec([0.2, -0.2, 0.2, 1.0]), 0.5).values, [0.0, 0.0, 0.2, 1.0])


@pytest.mark.parametrize("sparsity", [0.6, 0.75, 0.9])
def test_prune_zero_count(sparsity):
    """Test exactly floor(sparsity * n) coordinates are zeroed."""
    g = _vec(np.random.default_rng(3).normal(size=1000))
    pruned = prune(g, sparsity)
    assert np.count_nonzero(pruned.values == 0.0) == int(np.floor(sparsity * 1000))
    survivors = pruned.values != 0.0
    np.testing.assert_array_equal(pruned.values[survivors], g.values[survivors])
    assert pruned.norm() <= g.norm()
    np.testing.assert_array_equal(prune(pruned, sparsity).values, pruned.values)


def test_prune_rejects_full_sparsity():
    """Test sparsity must stay below 1."""
    with pytest.raises(RejectedInputError):
        prune(_vec([1.0, 2.0]), 1.0)


def test_apply_policy_none_is_identity():
    """Test mode none passes the update through."""
    g = _vec([1.0, 2.0])
    assert apply_policy(g, DpPolicy(), np.random.default_rng(0)) is g


def test_apply_policy_prune():
    """Test mode prune at 0.9 leaves 90% zeros."""
    g = _vec(np.random.default_rng(4).normal(size=500))
    out = apply_policy(g, DpPolicy(mode=DpMode.prune, sparsity=0.9), np.random.default_rng(0))
    assert np.count_nonzero(out.values == 0.0) == 450


def test_apply_policy_noise_delegates():
    """Test mode gaussian_noise matches add_gaussian_noise under the same seed."""
    g = _vec(np.arange(20, dtype=np.float64))
    policy = DpPolicy(mode=DpMode.gaussian_noise, sigma=0.15)
    np.testing.assert_array_equal(
        apply_policy(g, policy, np.random.default_rng(5)).values,
        add_gaussian_noise(g, 0.15, np.random.default_rng(5)).values,
    )


@pytest.mark.parametrize(
    "policy",
    [
        DpPolicy(mode=DpMode.gaussian_noise, sigma=0.1),
        DpPolicy(mode=DpMode.value_clip, clip_bound=0.8),
        DpPolicy(mode=DpMode.norm_clip, clip_bound=0.8),
        DpPolicy(mode=DpMode.prune, sparsity=0.6),
    ],
)
def test_policies_preserve_length_and_fingerprint(policy):
    """Test every transform keeps the update's shape and spec."""
    g = _vec(np.random.default_rng(6).normal(size=64))
    out = apply_policy(g, policy, np.random.default_rng(0))
    assert len(out) == len(g)
    assert out.spec_fingerprint == g.spec_fingerprint


def test_policy_labels():
    """Test policy labels used in file names and summaries."""
    assert DpPolicy().label() == "none"
    assert DpPolicy(mode=DpMode.prune, sparsity=0.6).label() == "prune_0.6"
    assert DpPolicy(mode=DpMode.gaussian_noise, sigma=0.05).label() == "noise_0.05"
    assert DpPolicy(mode=DpMode.value_clip, clip_bound=0.8).label() == "value_clip_0.8"


if __name__ == "__main__":
    pytest.main([__file__])
