"""Encoder f, classification head g, projection head h, and the EMA shadow."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import diffcore as dc

CHECKPOINT_FORMAT = "dualmatch-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Arch:
    input_dim: int
    num_classes: int
    hidden: tuple[int, ...] = (64, 64)
    feature_dim: int = 32
    embed_dim: int = 16

    def __post_init__(self):
        widths = (self.input_dim, *self.hidden, self.feature_dim, self.num_classes, self.embed_dim)
        if any(int(w) < 1 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        widths = (self.input_dim, *self.hidden, self.feature_dim)
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            shapes[f"enc.{i}.w"] = (fan_in, fan_out)
            shapes[f"enc.{i}.b"] = (fan_out,)
        shapes["cls.w"] = (self.feature_dim, self.num_classes)
        shapes["cls.b"] = (self.num_classes,)
        shapes["proj.0.w"] = (self.feature_dim, self.feature_dim)
        shapes["proj.0.b"] = (self.feature_dim,)
        shapes["proj.1.w"] = (self.feature_dim, self.embed_dim)
        shapes["proj.1.b"] = (self.embed_dim,)
        return shapes

    @property
    def n_encoder_layers(self) -> int:
        return len(self.hidden) + 1


@dataclass
class ModelParams:
    arch: Arch
    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def names(self) -> list[str]:
        return list(self.tensors)

    def check_like(self, other: "ModelParams") -> None:
        if self.tensors.keys() != other.tensors.keys():
            raise ValueError("parameter sets have different names")
        for k, v in self.tensors.items():
            if v.shape != other.tensors[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {other.tensors[k].shape}")


@dataclass
class EmaState:
    shadow: ModelParams
    decay: float = 0.999


def is_weight(name: str) -> bool:
    return name.endswith(".w")


def init_params(arch: Arch, seed: int) -> ModelParams:
    """He-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in arch.layer_shapes().items():
        if is_weight(name):
            limit = np.sqrt(6.0 / shape[0])
            tensors[name] = rng.uniform(-limit, limit, size=shape)
        else:
            tensors[name] = np.zeros(shape)
    return ModelParams(arch, tensors)


def as_leaves(params: ModelParams) -> dict[str, dc.Tensor]:
    return {k: dc.leaf(v, name=k) for k, v in params.tensors.items()}


def _dense(x: dc.Tensor, w, b) -> dc.Tensor:
    return dc.add(dc.matmul(x, w), b)


def features(params, x) -> dc.Tensor:
    w = params.tensors if isinstance(params, ModelParams) else params
    arch_layers = sum(1 for k in w if k.startswith("enc.") and k.endswith(".w"))
    h = x if isinstance(x, dc.Tensor) else dc.Tensor(x)
    for i in range(arch_layers):
        h = dc.relu(_dense(h, w[f"enc.{i}.w"], w[f"enc.{i}.b"]))
    return h


def heads(params, h: dc.Tensor) -> tuple[dc.Tensor, dc.Tensor]:
    w = params.tensors if isinstance(params, ModelParams) else params
    p = dc.softmax(_dense(h, w["cls.w"], w["cls.b"]))
    hidden = dc.relu(_dense(h, w["proj.0.w"], w["proj.0.b"]))
    z = dc.l2_normalize(_dense(hidden, w["proj.1.w"], w["proj.1.b"]))
    return p, z


def forward(params: ModelParams | Mapping[str, dc.Tensor], x) -> tuple[dc.Tensor, dc.Tensor]:
    """Class probabilities ``p = g(f(x))`` and unit embeddings ``z = h(f(x))``.

    ``params`` is either a :class:`ModelParams` (plain arrays, nothing is
    tracked) or a name -> Tensor mapping such as :func:`as_leaves` returns.
    """
    x_arr = x.data if isinstance(x, dc.Tensor) else np.asarray(x, dtype=np.float64)
    w = params.tensors if isinstance(params, ModelParams) else params
    expected = w["enc.0.w"].shape[0]
    if x_arr.ndim != 2 or x_arr.shape[1] != expected:
        raise dc.ShapeError(f"expected n x {expected} input, got {x_arr.shape}")
    return heads(w, features(w, x))


def predict_proba(params: ModelParams, x) -> np.ndarray:
    # classifier branch only: evaluation must not depend on the projector
    x = np.asarray(x, dtype=np.float64)
    w = params.tensors
    if x.ndim != 2 or x.shape[1] != w["enc.0.w"].shape[0]:
        raise dc.ShapeError(f"expected n x {w['enc.0.w'].shape[0]} input, got {x.shape}")
    return dc.softmax(_dense(features(w, x), w["cls.w"], w["cls.b"])).data


def init_ema(params: ModelParams, decay: float) -> EmaState:
    return EmaState(params.copy(), decay)


def ema_update(ema: EmaState, params: ModelParams) -> EmaState:
    """shadow <- m * shadow + (1 - m) * params."""
    ema.shadow.check_like(params)
    m = ema.decay
    shadow = {
        k: m * v + (1.0 - m) * params.tensors[k] for k, v in ema.shadow.tensors.items()
    }
    return EmaState(ModelParams(ema.shadow.arch, shadow), m)


@dataclass
class Checkpoint:
    params: ModelParams
    ema: EmaState | None = None
    step: int = 0
    meta: dict = field(default_factory=dict)


def _encode(params: ModelParams) -> dict:
    return {
        k: {"shape": list(v.shape), "data": [float(x) for x in v.ravel()]}
        for k, v in params.tensors.items()
    }


def _decode(arch: Arch, blob: dict) -> ModelParams:
    tensors = {}
    shapes = arch.layer_shapes()
    for name, entry in blob.items():
        shape = tuple(entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != int(np.prod(shape)) or shapes.get(name) != shape:
            raise ValueError(f"checkpoint tensor {name} does not match the architecture")
        tensors[name] = data.reshape(shape)
    if tensors.keys() != shapes.keys():
        raise ValueError("checkpoint is missing parameters")
    return ModelParams(arch, {k: tensors[k] for k in shapes})


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """JSON with a format/version header; floats round-trip exactly."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": asdict(ckpt.params.arch),
        "step": ckpt.step,
        "meta": ckpt.meta,
        "params": _encode(ckpt.params),
        "ema": None
        if ckpt.ema is None
        else {"decay": ckpt.ema.decay, "params": _encode(ckpt.ema.shadow)},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> Checkpoint:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    a = doc["arch"]
    arch = Arch(
        a["input_dim"], a["num_classes"], tuple(a["hidden"]), a["feature_dim"], a["embed_dim"]
    )
    params = _decode(arch, doc["params"])
    ema = None
    if doc.get("ema") is not None:
        ema = EmaState(_decode(arch, doc["ema"]["params"]), doc["ema"]["decay"])
    return Checkpoint(params, ema, doc.get("step", 0), doc.get("meta", {}))
