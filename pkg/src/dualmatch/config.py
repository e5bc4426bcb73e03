"""Experiment configuration files and data construction.

A config file is TOML. Keys may be nested tables or dotted keys; they are
flattened to dotted names before interpretation::

    steps = 3000                 # any TrainConfig field, bare or as train.<field>
    model.hidden = [64, 64]
    aug.weak.sigma = 0.05
    aug.strong.pool = ["dropout", "scale", "jitter"]
    aug.strong.k = 2
    aug.strong.magnitude = [0.1, 0.5]
    data.synthetic = "blobs:classes=3,dim=2,per_class=204,test_per_class=100,spread=0.3"
    data.labels_per_class = 4
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentPolicy
from .data import Dataset, load_dataset, make_blobs, make_imbalanced_split, realize_split, split_ssl
from .evaluation import evaluate, pseudo_label_quality
from .trainer import TrainConfig, TrainResult, train

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    synthetic: str | None = "blobs:classes=3,dim=2,per_class=204,test_per_class=100,spread=0.3"
    path: str | None = None
    test_path: str | None = None
    labels_per_class: int = 4
    # None: derive the split/sampling seed from the run seed
    seed: int | None = None
    unlabeled_includes_labeled: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class RunResult:
    result: TrainResult
    final_error: float
    pl_error: float
    high_conf_ratio: float
    labeled: Dataset
    unlabeled: Dataset
    test: Dataset | None

    @property
    def history(self):
        return self.result.history


def parse_value(text: str):
    """Parse a command-line ``key=value`` right-hand side as a TOML value,
    falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def flatten(tree: dict, prefix: str = "") -> dict:
    flat = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(flatten(v, key + "."))
        else:
            flat[key] = v
    return flat


_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)} - {"aug"}
_DATA_FIELDS = {f.name for f in dataclasses.fields(DataConfig)}
_MODEL_KEYS = {"model.hidden": "arch_hidden", "model.feature_dim": "feature_dim", "model.embed_dim": "embed_dim"}
_AUG_KEYS = {
    "aug.weak.sigma": "weak_sigma",
    "aug.strong.pool": "strong_pool",
    "aug.strong.k": "strong_k",
    "aug.strong.magnitude": "magnitude_range",
}


def build_config(flat: dict) -> ExperimentConfig:
    train_kw, data_kw, aug_kw = {}, {}, {}
    for key, value in flat.items():
        bare = key.removeprefix("train.")
        if key in _MODEL_KEYS:
            train_kw[_MODEL_KEYS[key]] = tuple(value) if key == "model.hidden" else value
        elif key in _AUG_KEYS:
            name = _AUG_KEYS[key]
            if name == "strong_pool":
                value = tuple([value] if isinstance(value, str) else value)
            elif name == "magnitude_range":
                value = (0.0, float(value)) if isinstance(value, (int, float)) else tuple(value)
                if len(value) != 2:
                    raise ConfigError("aug.strong.magnitude must be a number or [lo, hi]")
            aug_kw[name] = value
        elif key.startswith("data.") and key[5:] in _DATA_FIELDS:
            data_kw[key[5:]] = value
        elif bare in _TRAIN_FIELDS:
            train_kw[bare] = tuple(value) if bare == "arch_hidden" else value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if "path" in data_kw and "synthetic" not in data_kw:
        data_kw["synthetic"] = None
    try:
        aug = AugmentPolicy(**aug_kw)
        return ExperimentConfig(DataConfig(**data_kw), TrainConfig(aug=aug, **train_kw))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    flat = {}
    if path is not None:
        try:
            flat = flatten(tomllib.loads(Path(path).read_text()))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    flat.update(overrides or {})
    return build_config(flat)


def parse_synthetic(spec: str) -> tuple[str, dict]:
    """``kind:key=value,...`` -> (kind, params)."""
    kind, _, rest = spec.partition(":")
    params = {}
    for item in filter(None, rest.split(",")):
        k, sep, v = item.partition("=")
        if not sep:
            raise ConfigError(f"bad synthetic parameter {item!r} in {spec!r}")
        params[k.strip()] = parse_value(v.strip())
    if kind not in ("blobs", "longtail"):
        raise ConfigError(f"unknown synthetic dataset kind {kind!r}")
    return kind, params


def _split_seeds(seed: int) -> tuple[int, int, int]:
    a, b, c = np.random.SeedSequence([seed, 7919]).spawn(3)
    return tuple(int(s.generate_state(1)[0]) for s in (a, b, c))


def build_data(cfg: DataConfig, run_seed: int = 0) -> tuple[Dataset, Dataset, Dataset | None]:
    """(labeled X, unlabeled U, test set or None)."""
    seed = run_seed if cfg.seed is None else cfg.seed
    s_data, s_split, s_test = _split_seeds(seed)
    if cfg.path is not None:
        full = load_dataset(cfg.path)
        test = load_dataset(cfg.test_path) if cfg.test_path else None
        if full.hidden.any():
            x = full.subset(np.flatnonzero(~full.hidden))
            u = full.subset(np.flatnonzero(full.hidden))
        else:
            x, u = split_ssl(full, cfg.labels_per_class, s_split, cfg.unlabeled_includes_labeled)
        return x, u, test
    if cfg.synthetic is None:
        raise ConfigError("no dataset: set data.synthetic or data.path")
    kind, p = parse_synthetic(cfg.synthetic)
    try:
        if kind == "blobs":
            c, d = int(p.get("classes", 3)), int(p.get("dim", 2))
            spread, radius = float(p.get("spread", 0.3)), float(p.get("radius", 1.0))
            full = make_blobs(c, d, int(p.get("per_class", 204)), spread, s_data, radius)
            test = make_blobs(c, d, int(p.get("test_per_class", 100)), spread, s_test, radius)
            x, u = split_ssl(full, cfg.labels_per_class, s_split, cfg.unlabeled_includes_labeled)
            return x, u, test
        spec = make_imbalanced_split(
            int(p.get("classes", 10)),
            int(p.get("majority", 500)),
            float(p.get("gamma", 100)),
            float(p.get("beta", 0.1)),
            s_data,
        )
        return realize_split(
            spec,
            int(p.get("dim", 2)),
            float(p.get("spread", 0.3)),
            int(p.get("test_per_class", 100)),
            float(p.get("radius", 1.0)),
        )
    except KeyError as exc:  # pragma: no cover
        raise ConfigError(f"missing synthetic parameter {exc}") from exc


def run_experiment(exp: ExperimentConfig, seed: int | None = None, callback=None) -> RunResult:
    seed = exp.train.seed if seed is None else seed
    cfg = exp.train.replace(seed=seed)
    x, u, test = build_data(exp.data, seed)
    result = train(cfg, x, u, test, callback=callback)
    final = evaluate(result.ema.shadow, test) if test is not None else float("nan")
    pl_err, ratio = pseudo_label_quality(result.ema.shadow, u, cfg.tau)
    return RunResult(result, final, pl_err, ratio, x, u, test)
