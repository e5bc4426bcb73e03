import numpy as np
import pytest

from dualmatch.augment import (
    POOL,
    AugmentPolicy,
    apply_transform,
    mean_distortion,
    strong_augment,
    strong_augment_batch,
    weak_augment,
    weak_augment_batch,
)
from dualmatch.data import class_means, make_blobs


def test_zero_sigma_is_identity():
    x = np.array([0.3, -1.0, 2.5])
    out = weak_augment(x, AugmentPolicy(weak_sigma=0.0), np.random.default_rng(0))
    np.testing.assert_array_equal(out, x)


def test_weak_is_unbiased():
    policy = AugmentPolicy(weak_sigma=0.2)
    x = np.array([1.0, -2.0, 0.5])
    draws = weak_augment_batch(np.tile(x, (10_000, 1)), policy, np.random.default_rng(1))
    assert np.all(np.abs(draws.mean(axis=0) - x) < 3 * policy.weak_sigma / 100)
    np.testing.assert_allclose(draws.std(axis=0), 0.2, rtol=0.05)


def test_weak_calls_differ():
    rng = np.random.default_rng(2)
    x = np.zeros(4)
    assert not np.array_equal(weak_augment(x, AugmentPolicy(), rng), weak_augment(x, AugmentPolicy(), rng))


def test_identity_pool():
    x = np.array([0.5, 1.5, -2.0])
    out = strong_augment(x, AugmentPolicy(strong_pool=("identity",), strong_k=1), np.random.default_rng(3))
    np.testing.assert_array_equal(out, x)


def test_full_dropout_zeroes():
    out = apply_transform("dropout", np.array([[1.0, 2.0, 3.0]]), 1.0, np.random.default_rng(4))
    np.testing.assert_array_equal(out, 0.0)


def test_partial_dropout_never_wipes_a_row():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2000, 2))
    out = apply_transform("dropout", x, 0.99, rng)
    assert out.any(axis=1).all()
    # surviving coordinates are untouched
    assert np.all((out == 0) | (out == x))


def test_scale_bounds():
    rng = np.random.default_rng(6)
    x = np.ones((500, 3))
    out = apply_transform("scale", x, 0.3, rng)
    assert np.all((out >= 0.7) & (out <= 1.3))
    # one factor per row
    assert np.all(out == out[:, :1])


def test_block_permute_is_a_permutation():
    rng = np.random.default_rng(7)
    x = np.tile(np.arange(8.0), (50, 1))
    out = apply_transform("block_permute", x, 0.5, rng)
    assert np.all(np.sort(out, axis=1) == x)
    assert not np.array_equal(out, x)


@pytest.mark.parametrize("name", POOL)
def test_every_transform_is_deterministic_per_rng_state(name):
    x = np.random.default_rng(8).standard_normal((20, 5))
    a = apply_transform(name, x, 0.4, np.random.default_rng(9))
    b = apply_transform(name, x, 0.4, np.random.default_rng(9))
    assert a.tobytes() == b.tobytes()


def test_strong_batch_deterministic():
    x = np.random.default_rng(10).standard_normal((30, 4))
    a = strong_augment_batch(x, AugmentPolicy(), np.random.default_rng(11))
    b = strong_augment_batch(x, AugmentPolicy(), np.random.default_rng(11))
    assert a.tobytes() == b.tobytes()


def test_strong_dominates_weak():
    policy = AugmentPolicy()
    x = np.array([0.7, -0.4])
    weak = mean_distortion(x, weak_augment_batch, policy, np.random.default_rng(12), 1000)
    strong = mean_distortion(x, strong_augment_batch, policy, np.random.default_rng(13), 1000)
    assert strong > weak


def test_weak_preserves_nearest_mean_label():
    means = class_means(3, 2)
    ds = make_blobs(3, 2, 3334, 0.3, seed=14)
    x = ds.features[:10_000]
    aug = weak_augment_batch(x, AugmentPolicy(), np.random.default_rng(15))

    def nearest(a):
        return np.argmin(((a[:, None, :] - means[None]) ** 2).sum(-1), axis=1)

    assert np.mean(nearest(x) == nearest(aug)) >= 0.99


def test_weak_sigma_is_small_relative_to_class_spacing():
    means = class_means(3, 2)
    gap = min(np.linalg.norm(means[i] - means[j]) for i in range(3) for j in range(i + 1, 3))
    assert AugmentPolicy().weak_sigma < gap / 4


@pytest.mark.parametrize(
    "kwargs",
    [
        {"strong_pool": ("rotate",)},
        {"strong_pool": ()},
        {"strong_k": 0},
        {"magnitude_range": (0.5, 0.1)},
    ],
)
def test_invalid_policy(kwargs):
    with pytest.raises(ValueError):
        AugmentPolicy(**kwargs)
