"""Synthetic datasets, SSL splits and the labeled/unlabeled batch stream."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HIDDEN = -1


@dataclass(frozen=True)
class Dataset:
    """Feature rows with labels.

    ``labels`` are the true classes. ``hidden`` flags rows whose label the
    training path must not read (the unlabeled set); the label is kept only
    for pseudo-label diagnostics and may be ``-1`` when genuinely unknown.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    hidden: np.ndarray | None = None

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or labels.shape != (feats.shape[0],):
            raise ValueError("features must be N x d and labels length N")
        if np.any(labels >= self.num_classes) or np.any(labels < HIDDEN):
            raise ValueError("label out of range")
        hidden = (
            np.zeros(len(labels), dtype=bool)
            if self.hidden is None
            else np.asarray(self.hidden, dtype=bool)
        )
        if np.any((labels == HIDDEN) & ~hidden):
            raise ValueError("label -1 is only allowed on hidden (unlabeled) rows")
        for arr in (feats, labels, hidden):
            arr.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "hidden", hidden)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx, hide: bool | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        hidden = self.hidden[idx] if hide is None else np.full(len(idx), hide)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, hidden)

    def class_counts(self) -> np.ndarray:
        known = self.labels[self.labels >= 0]
        return np.bincount(known, minlength=self.num_classes)


@dataclass(frozen=True)
class SplitSpec:
    num_classes: int
    per_class_labeled: tuple[int, ...]
    per_class_unlabeled: tuple[int, ...]
    gamma: float
    beta: float
    seed: int

    @property
    def labeled_ratio(self) -> float:
        m = sum(self.per_class_labeled)
        return m / (m + sum(self.per_class_unlabeled))


@dataclass
class BatchPair:
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    # true labels of the unlabeled rows, for diagnostics only
    unlabeled_hidden_y: np.ndarray = field(repr=False)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def class_means(num_classes: int, dim: int, radius: float = 1.0) -> np.ndarray:
    """Class centres evenly spaced on a circle in the first two coordinates."""
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    means = np.zeros((num_classes, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def make_blobs(
    num_classes: int,
    dim: int,
    n_per_class: int,
    spread: float,
    seed: int,
    radius: float = 1.0,
) -> Dataset:
    """Isotropic Gaussian clusters, exactly ``n_per_class`` rows per class."""
    counts = [n_per_class] * num_classes
    return make_blobs_counts(counts, dim, spread, seed, radius)


def make_blobs_counts(
    counts, dim: int, spread: float, seed: int, radius: float = 1.0
) -> Dataset:
    num_classes = len(counts)
    if num_classes < 2 or dim < 2:
        raise ValueError("need at least 2 classes and 2 dimensions")
    if spread <= 0:
        raise ValueError("spread must be positive")
    rng = np.random.default_rng(seed)
    means = class_means(num_classes, dim, radius)
    labels = np.repeat(np.arange(num_classes), counts)
    feats = means[labels] + spread * rng.standard_normal((len(labels), dim))
    return Dataset(feats, labels, num_classes)


def split_ssl(
    dataset: Dataset,
    labels_per_class: int,
    seed: int,
    unlabeled_includes_labeled: bool = False,
) -> tuple[Dataset, Dataset]:
    """Draw ``labels_per_class`` labeled rows per class; the rest are unlabeled."""
    rng = np.random.default_rng(seed)
    labeled = []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if labels_per_class > len(idx):
            raise ValueError(
                f"class {c} has {len(idx)} examples, cannot take {labels_per_class}"
            )
        labeled.append(rng.choice(idx, size=labels_per_class, replace=False))
    x_idx = np.sort(np.concatenate(labeled)).astype(np.int64)
    if unlabeled_includes_labeled:
        u_idx = np.arange(len(dataset))
    else:
        u_idx = np.setdiff1d(np.arange(len(dataset)), x_idx)
    return dataset.subset(x_idx, hide=False), dataset.subset(u_idx, hide=True)


def long_tail_profile(num_classes: int, majority: int, gamma: float) -> list[int]:
    """Per-class counts M_1 * gamma^(-(c-1)/(C-1)), rounded half up.

    The last class is pinned to M_1 / gamma (rounded half up), so the ratio is
    exact whenever M_1 / gamma is an integer.
    """
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    counts = [
        _round_half_up(majority * gamma ** (-c / (num_classes - 1)))
        for c in range(num_classes)
    ]
    counts[-1] = _round_half_up(majority / gamma)
    if counts[-1] == 0:
        raise ValueError("minority class rounds to zero examples")
    return counts


def make_imbalanced_split(
    num_classes: int, majority: int, gamma: float, beta: float, seed: int
) -> SplitSpec:
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    labeled = long_tail_profile(num_classes, majority, gamma)
    unlabeled = [_round_half_up(m * (1 - beta) / beta) for m in labeled]
    return SplitSpec(num_classes, tuple(labeled), tuple(unlabeled), gamma, beta, seed)


def realize_split(
    spec: SplitSpec,
    dim: int,
    spread: float,
    n_test_per_class: int,
    radius: float = 1.0,
) -> tuple[Dataset, Dataset, Dataset]:
    """Sample blob data following ``spec``; returns (X, U, balanced test)."""
    ss = np.random.SeedSequence(spec.seed)
    s_x, s_u, s_t = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    x = make_blobs_counts(spec.per_class_labeled, dim, spread, s_x, radius)
    u = make_blobs_counts(spec.per_class_unlabeled, dim, spread, s_u, radius)
    test = make_blobs(spec.num_classes, dim, n_test_per_class, spread, s_t, radius)
    return x, u.subset(np.arange(len(u)), hide=True), test


class BatchStream:
    """Endless labeled/unlabeled batches of sizes B and mu*B.

    Each set is walked in a fresh random order per epoch; a batch that runs off
    the end of an epoch continues into the next one, so small sets wrap.
    """

    def __init__(self, labeled: Dataset, unlabeled: Dataset, batch_size: int, mu: int, rng):
        if len(labeled) == 0 or len(unlabeled) == 0:
            raise ValueError("labeled and unlabeled sets must be non-empty")
        self.labeled = labeled
        self.unlabeled = unlabeled
        self.batch_size = batch_size
        self.mu = mu
        self.rng = rng
        self._orders = {"x": np.empty(0, np.int64), "u": np.empty(0, np.int64)}

    def _draw(self, key: str, n_total: int, k: int) -> np.ndarray:
        order = self._orders[key]
        while len(order) < k:
            order = np.concatenate([order, self.rng.permutation(n_total)])
        self._orders[key] = order[k:]
        return order[:k]

    def __iter__(self):
        return self

    def __next__(self) -> BatchPair:
        xi = self._draw("x", len(self.labeled), self.batch_size)
        ui = self._draw("u", len(self.unlabeled), self.mu * self.batch_size)
        return BatchPair(
            self.labeled.features[xi],
            self.labeled.labels[xi],
            self.unlabeled.features[ui],
            self.unlabeled.labels[ui],
        )


def next_batch(stream: BatchStream) -> BatchPair:
    return next(stream)


def save_dataset(dataset: Dataset, path) -> None:
    """Write the ``C d N`` header then one ``label f_1 ... f_d`` line per row.

    Hidden rows are written with label -1.
    """
    lines = [f"{dataset.num_classes} {dataset.dim} {len(dataset)}"]
    for row, label, hid in zip(dataset.features, dataset.labels, dataset.hidden):
        lab = HIDDEN if hid else int(label)
        lines.append(" ".join([str(lab)] + [repr(float(v)) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    text = Path(path).read_text().split("\n")
    rows = [ln for ln in text if ln.strip()]
    if not rows:
        raise ValueError(f"{path}: empty dataset file")
    header = rows[0].split()
    try:
        num_classes, dim, n = (int(v) for v in header)
    except ValueError:
        raise ValueError(f"{path}: malformed header {rows[0]!r}, expected 'C d N'") from None
    body = rows[1:]
    if len(body) != n:
        raise ValueError(f"{path}: header says {n} rows, found {len(body)}")
    labels = np.empty(n, dtype=np.int64)
    feats = np.empty((n, dim))
    for i, line in enumerate(body):
        parts = line.split()
        if len(parts) != dim + 1:
            raise ValueError(f"{path}: row {i + 1} has {len(parts) - 1} features, expected {dim}")
        labels[i] = int(parts[0])
        feats[i] = [float(v) for v in parts[1:]]
    return Dataset(feats, labels, num_classes, hidden=labels == HIDDEN)
