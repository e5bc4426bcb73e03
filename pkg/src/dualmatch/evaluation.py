"""Test error, pseudo-label diagnostics and multi-seed aggregation."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .model import ModelParams, predict_proba
from .objective import DaState, distribution_align


def evaluate(params: ModelParams, test: Dataset) -> float:
    """Percentage of test rows whose argmax prediction is wrong."""
    if len(test) == 0:
        raise ValueError("empty test set")
    pred = np.argmax(predict_proba(params, test.features), axis=1)
    return float(np.mean(pred != test.labels) * 100.0)


def pseudo_label_quality(
    params: ModelParams,
    unlabeled: Dataset,
    tau: float,
    da: DaState | None = None,
) -> tuple[float, float]:
    """(error % of argmax predictions on all of U, share of rows with confidence >= tau).

    Uses raw confidences unless a DA buffer is passed. Rows whose true label is
    unknown (-1) are left out of the error but counted in the ratio.
    """
    p = predict_proba(params, unlabeled.features)
    if da is not None:
        p, _ = distribution_align(p, da)
    known = unlabeled.labels >= 0
    err = (
        float(np.mean(np.argmax(p[known], axis=1) != unlabeled.labels[known]) * 100.0)
        if known.any()
        else float("nan")
    )
    ratio = float(np.mean(p.max(axis=1) >= tau)) if len(p) else float("nan")
    return err, ratio


def config_fingerprint(config) -> str:
    """Stable hash of a (possibly nested) config made of dataclasses/dicts."""
    blob = json.dumps(_plain(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _plain(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _plain(getattr(obj, k)) for k in obj.__dataclass_fields__}
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


@dataclass
class ExperimentReport:
    name: str
    seeds: list[int]
    errors: list[float]
    fingerprint: str
    curves: dict[int, list[dict]] = field(default_factory=dict, repr=False)
    extras: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors))

    @property
    def std(self) -> float | None:
        # sample standard deviation; undefined for a single seed
        return float(np.std(self.errors, ddof=1)) if len(self.errors) >= 2 else None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "fingerprint": self.fingerprint,
            "seeds": list(self.seeds),
            "test_error_ema": list(self.errors),
            "mean": self.mean,
            "std": self.std,
            **self.extras,
        }


def run_suite(experiment, seeds, name: str = "dualmatch", train_fn=None) -> ExperimentReport:
    """Train ``experiment`` once per seed and collect final EMA test errors.

    ``experiment`` is an :class:`~dualmatch.config.ExperimentConfig`. Each
    seed replaces the training seed, and also picks a fresh data draw and
    labeled split unless ``data.seed`` pins them.
    """
    from .config import run_experiment

    seeds = list(seeds)
    if not seeds:
        raise ValueError("run_suite needs at least one seed")
    train_fn = train_fn or run_experiment
    errors, curves, pl = [], {}, []
    for seed in seeds:
        result = train_fn(experiment, seed)
        errors.append(result.final_error)
        curves[seed] = result.history
        pl.append(result.pl_error)
    extras = {"unlabeled_error_ema": pl}
    return ExperimentReport(name, seeds, errors, config_fingerprint(experiment), curves, extras)
