"""Weak and strong perturbations for feature vectors.

Weak augmentation is small isotropic jitter. Strong augmentation composes
``k`` transforms drawn uniformly from a pool, each at a magnitude drawn
uniformly from ``magnitude_range``, in the spirit of RandAugment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

POOL = ("dropout", "scale", "uniform_noise", "block_permute", "jitter")


@dataclass(frozen=True)
class AugmentPolicy:
    weak_sigma: float = 0.05
    strong_pool: tuple[str, ...] = POOL
    strong_k: int = 2
    magnitude_range: tuple[float, float] = (0.1, 0.5)

    def __post_init__(self):
        unknown = set(self.strong_pool) - set(POOL) - {"identity"}
        if unknown:
            raise ValueError(f"unknown strong transforms: {sorted(unknown)}")
        if not self.strong_pool or self.strong_k < 1:
            raise ValueError("strong pool must be non-empty and k >= 1")
        lo, hi = self.magnitude_range
        if not 0 <= lo <= hi:
            raise ValueError("magnitude_range must satisfy 0 <= lo <= hi")


def weak_augment_batch(x: np.ndarray, policy: AugmentPolicy, rng) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if policy.weak_sigma == 0:
        return x.copy()
    return x + policy.weak_sigma * rng.standard_normal(x.shape)


def weak_augment(x: np.ndarray, policy: AugmentPolicy, rng) -> np.ndarray:
    return weak_augment_batch(np.asarray(x)[None, :], policy, rng)[0]


def _dropout(x, m, rng):
    # each coordinate zeroed with probability m; below rate 1 a non-zero row
    # keeps one of its non-zero coordinates so the input never collapses to 0
    drop = rng.random(x.shape) < m[:, None]
    keys = rng.random(x.shape) * (x != 0)
    out = np.where(drop, 0.0, x)
    wiped = np.flatnonzero(~out.any(axis=1) & x.any(axis=1) & (m < 1))
    survivor = np.argmax(keys[wiped], axis=1)
    out[wiped, survivor] = x[wiped, survivor]
    return out


def _scale(x, m, rng):
    return x * rng.uniform(1 - m, 1 + m)[:, None]


def _uniform_noise(x, m, rng):
    return x + rng.uniform(-1.0, 1.0, x.shape) * m[:, None]


def _block_permute(x, m, rng):
    # shuffle a contiguous block of ceil(m*d) (at least 2) coordinates per row
    n, d = x.shape
    if d < 2:
        return x.copy()
    lengths = np.clip(np.ceil(m * d).astype(int), 2, d)
    starts = np.floor(rng.random(n) * (d - lengths + 1)).astype(int)
    pos = np.arange(d)[None, :]
    inside = (pos >= starts[:, None]) & (pos < (starts + lengths)[:, None])
    keys = np.where(
        inside, starts[:, None] + rng.random((n, d)) * lengths[:, None], pos.astype(float)
    )
    return np.take_along_axis(x, np.argsort(keys, axis=1, kind="stable"), axis=1)


def _jitter(x, m, rng):
    return x + rng.standard_normal(x.shape) * m[:, None]


_TRANSFORMS = {
    "identity": lambda x, m, rng: x,
    "dropout": _dropout,
    "scale": _scale,
    "uniform_noise": _uniform_noise,
    "block_permute": _block_permute,
    "jitter": _jitter,
}


def apply_transform(name: str, x: np.ndarray, magnitude, rng) -> np.ndarray:
    """Apply one named strong transform row-wise with per-row magnitudes."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    m = np.broadcast_to(np.asarray(magnitude, dtype=np.float64), (x.shape[0],))
    return _TRANSFORMS[name](x, m, rng)


def strong_augment_batch(x: np.ndarray, policy: AugmentPolicy, rng) -> np.ndarray:
    out = np.array(x, dtype=np.float64)
    n = out.shape[0]
    lo, hi = policy.magnitude_range
    pool = policy.strong_pool
    for _ in range(policy.strong_k):
        ops = rng.integers(0, len(pool), size=n)
        mags = rng.uniform(lo, hi, size=n)
        for j, name in enumerate(pool):
            rows = np.flatnonzero(ops == j)
            if len(rows):
                out[rows] = apply_transform(name, out[rows], mags[rows], rng)
    return out


def strong_augment(x: np.ndarray, policy: AugmentPolicy, rng) -> np.ndarray:
    return strong_augment_batch(np.asarray(x)[None, :], policy, rng)[0]


def mean_distortion(x: np.ndarray, augment, policy: AugmentPolicy, rng, draws: int) -> float:
    """Average ||aug(x) - x|| over ``draws`` independent applications."""
    batch = np.repeat(np.asarray(x, dtype=np.float64)[None, :], draws, axis=0)
    return float(np.linalg.norm(augment(batch, policy, rng) - batch, axis=1).mean())
