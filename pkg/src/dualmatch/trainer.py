"""The DualMatch training loop.

One step: augment, forward all views in a single pass, derive the detached
targets (aligned pseudo-labels, embedding set, aggregated soft labels), build
the weighted objective, back-propagate, take a Nesterov step at the cosine
learning rate, then fold the new weights into the EMA shadow.
"""

from __future__ import annotations

import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import objective as obj
from .augment import AugmentPolicy, strong_augment_batch, weak_augment_batch
from .data import BatchPair, BatchStream, Dataset
from .model import (
    Arch,
    EmaState,
    ModelParams,
    as_leaves,
    ema_update,
    forward,
    init_ema,
    init_params,
    is_weight,
)

log = logging.getLogger(__name__)

# the reference schedule starts the aggregation loss after 30 * 2^10 of 2^20 steps
WARMUP_FRACTION = 30 * 2**10 / 2**20

HISTORY_COLUMNS = (
    "step",
    "loss_x",
    "loss_u",
    "loss_scl",
    "loss_agg",
    "lr",
    "mask_ratio",
    "pl_error",
    "test_error_ema",
)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    mu: int = 7
    steps: int = 2**20
    base_lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lambda_u: float = 1.0
    lambda_scl: float = 1.0
    lambda_agg: float = 0.5
    tau: float = 0.95
    tau1: float = 0.9
    temperature: float = 0.5
    # "sum" is the literal anchor sum; "mean" divides by |Z| so the term does not scale with the batch
    scl_reduction: str = "mean"
    ema_decay: float = 0.999
    k_neighbors: int = 10
    warmup_steps: int | None = None
    eval_every: int = 100
    log_every: int = 1
    seed: int = 0
    use_da: bool = True
    # embedding-set composition: labeled weak views, unlabeled weak, unlabeled strong
    z_labeled_views: int = 1
    z_unlabeled_weak: bool = False
    z_unlabeled_strong: bool = True
    # admit unlabeled embeddings with the aligned-confidence mask instead of raw max(p_w) > tau
    unify_thresholds: bool = False
    # feed aligned instead of raw weak predictions into the neighbour aggregation
    aggregate_aligned: bool = False
    arch_hidden: tuple[int, ...] = (64, 64)
    feature_dim: int = 32
    embed_dim: int = 16
    aug: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        if self.batch_size < 1 or self.mu < 1 or self.steps < 1:
            raise ValueError("batch_size, mu and steps must be positive")
        if self.z_labeled_views not in (0, 1, 2):
            raise ValueError("z_labeled_views must be 0, 1 or 2")
        if self.k_neighbors < 0 or self.k_neighbors > self.mu * self.batch_size:
            raise ValueError("k_neighbors must lie in [0, mu * batch_size]")
        if min(self.lambda_u, self.lambda_scl, self.lambda_agg) < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def resolved_warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return int(round(self.steps * WARMUP_FRACTION))

    def arch(self, input_dim: int, num_classes: int) -> Arch:
        return Arch(input_dim, num_classes, self.arch_hidden, self.feature_dim, self.embed_dim)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class TrainState:
    params: ModelParams
    ema: EmaState
    da: obj.DaState
    velocity: dict[str, np.ndarray]
    step: int
    rng: np.random.Generator
    history: list[dict] = field(default_factory=list)


@dataclass
class Views:
    x_weak: np.ndarray
    y: np.ndarray
    u_weak: np.ndarray
    u_strong: np.ndarray
    u_hidden: np.ndarray
    x_weak2: np.ndarray | None = None


@dataclass
class ViewOutputs:
    p_x: dc.Tensor
    z_x: dc.Tensor
    p_w: dc.Tensor | None = None
    z_w: dc.Tensor | None = None
    p_s: dc.Tensor | None = None
    z_s: dc.Tensor | None = None
    z_x2: dc.Tensor | None = None


@dataclass
class Targets:
    pseudo: obj.PseudoLabels | None
    keep: np.ndarray | None
    agg: obj.AggregatedLabels | None
    lambda_agg: float
    da: obj.DaState


def cosine_lr(n: int, total: int, base: float = 0.03) -> float:
    """base * cos(7 pi n / (16 N))."""
    if n < 0 or n > total:
        raise ValueError(f"step {n} outside [0, {total}]")
    return base * math.cos(7.0 * math.pi * n / (16.0 * total))


def sgd_nesterov_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
    velocity: dict[str, np.ndarray],
    decay_mask: dict[str, bool] | None = None,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """g = grad + wd*theta; v = momentum*v + g; theta -= lr*(g + momentum*v).

    ``decay_mask`` selects which tensors receive weight decay (all by default).
    """
    new_params, new_velocity = {}, {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise dc.ShapeError(f"gradient shape {g.shape} does not match {name} {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise dc.NonFiniteError(f"non-finite gradient for {name}")
        if weight_decay and (decay_mask is None or decay_mask[name]):
            g = g + weight_decay * theta
        v = momentum * velocity[name] + g
        new_velocity[name] = v
        new_params[name] = theta - lr * (g + momentum * v)
    return new_params, new_velocity


def _uses_unlabeled(cfg: TrainConfig) -> bool:
    return cfg.lambda_u > 0 or cfg.lambda_scl > 0 or cfg.lambda_agg > 0


def make_views(batch: BatchPair, cfg: TrainConfig, rng: np.random.Generator) -> Views:
    x_weak = weak_augment_batch(batch.labeled_x, cfg.aug, rng)
    u_weak = weak_augment_batch(batch.unlabeled_x, cfg.aug, rng)
    u_strong = strong_augment_batch(batch.unlabeled_x, cfg.aug, rng)
    x_weak2 = None
    if cfg.lambda_scl > 0 and cfg.z_labeled_views == 2:
        x_weak2 = weak_augment_batch(batch.labeled_x, cfg.aug, rng)
    return Views(x_weak, batch.labeled_y, u_weak, u_strong, batch.unlabeled_hidden_y, x_weak2)


def forward_views(weights, views: Views, use_unlabeled: bool = True) -> ViewOutputs:
    """One forward pass over all views stacked row-wise, split back per view."""
    blocks = [views.x_weak]
    if use_unlabeled:
        blocks += [views.u_weak, views.u_strong]
    if views.x_weak2 is not None:
        blocks.append(views.x_weak2)
    p, z = forward(weights, np.concatenate(blocks, axis=0))
    bounds = np.cumsum([0] + [len(b) for b in blocks])
    parts = [
        (dc.take(p, slice(bounds[i], bounds[i + 1])), dc.take(z, slice(bounds[i], bounds[i + 1])))
        for i in range(len(blocks))
    ]
    out = ViewOutputs(*parts[0])
    if use_unlabeled:
        (out.p_w, out.z_w), (out.p_s, out.z_s) = parts[1], parts[2]
    if views.x_weak2 is not None:
        out.z_x2 = parts[-1][1]
    return out


def make_targets(out: ViewOutputs, da: obj.DaState, step: int, cfg: TrainConfig) -> Targets:
    """Detached pseudo-label targets for this step; advances the DA buffer."""
    lambda_agg = cfg.lambda_agg if step >= cfg.resolved_warmup else 0.0
    if out.p_w is None:
        return Targets(None, None, None, lambda_agg, da)
    p_w = out.p_w.data
    if cfg.use_da:
        aligned, da = obj.distribution_align(p_w, da)
    else:
        aligned = p_w
    pseudo = obj.make_pseudo_labels(aligned, cfg.tau)
    keep = pseudo.mask if cfg.unify_thresholds else obj.confident_raw(p_w, cfg.tau)
    agg = None
    if cfg.k_neighbors > 0:
        agg_input = aligned if cfg.aggregate_aligned else p_w
        agg = obj.aggregate_pseudo(out.z_w.data, agg_input, cfg.k_neighbors, cfg.tau1)
    return Targets(pseudo, keep, agg, lambda_agg, da)


def embedding_set(out: ViewOutputs, y: np.ndarray, t: Targets, cfg: TrainConfig) -> obj.EmbeddingSet:
    extra = []
    if cfg.z_labeled_views == 2 and out.z_x2 is not None:
        extra.append((out.z_x2, np.asarray(y), "labeled"))
    if cfg.z_unlabeled_weak:
        idx = np.flatnonzero(t.keep)
        if len(idx):
            extra.append((dc.take(out.z_w, idx), t.pseudo.hard[idx], "unlabeled"))
    return obj.build_embedding_set(
        out.z_x if cfg.z_labeled_views > 0 else None,
        y,
        out.z_s if cfg.z_unlabeled_strong else None,
        t.pseudo,
        t.keep,
        extra=tuple(extra),
    )


def loss_terms(out: ViewOutputs, y: np.ndarray, t: Targets, cfg: TrainConfig) -> dict[str, dc.Tensor]:
    """Each loss term that has a non-zero weight; the others are 0 constants."""
    zero = dc.Tensor(0.0)
    terms = {"loss_x": obj.supervised_loss(y, out.p_x)}
    terms["loss_u"] = (
        obj.unsupervised_loss(t.pseudo, out.p_s) if cfg.lambda_u > 0 and t.pseudo else zero
    )
    if cfg.lambda_scl > 0 and t.pseudo is not None:
        zset = embedding_set(out, y, t, cfg)
        if len(zset) >= 2:
            s = obj.similarity_matrix(zset.z)
            terms["loss_scl"] = obj.scl_loss(
                obj.contrastive_matrix(zset.labels), s, cfg.temperature, cfg.scl_reduction
            )
        else:
            terms["loss_scl"] = zero
    else:
        terms["loss_scl"] = zero
    terms["loss_agg"] = (
        obj.aggregation_loss(t.agg, out.p_s) if t.lambda_agg > 0 and t.agg is not None else zero
    )
    return terms


def total_loss(terms: dict[str, dc.Tensor], t: Targets, cfg: TrainConfig) -> dc.Tensor:
    return obj.overall_loss(
        terms["loss_x"],
        terms["loss_u"],
        terms["loss_scl"],
        terms["loss_agg"],
        cfg.lambda_u,
        cfg.lambda_scl,
        t.lambda_agg,
    )


def init_state(cfg: TrainConfig, input_dim: int, num_classes: int) -> TrainState:
    init_seed, aug_seed, _ = np.random.SeedSequence(cfg.seed).spawn(3)
    params = init_params(cfg.arch(input_dim, num_classes), int(init_seed.generate_state(1)[0]))
    return TrainState(
        params=params,
        ema=init_ema(params, cfg.ema_decay),
        da=obj.DaState(),
        velocity={k: np.zeros_like(v) for k, v in params.tensors.items()},
        step=0,
        rng=np.random.default_rng(aug_seed),
    )


def train_step(state: TrainState, batch: BatchPair, cfg: TrainConfig) -> tuple[TrainState, dict]:
    n = state.step
    views = make_views(batch, cfg, state.rng)
    leaves = as_leaves(state.params)
    try:
        out = forward_views(leaves, views, use_unlabeled=_uses_unlabeled(cfg))
        targets = make_targets(out, state.da, n, cfg)
        terms = loss_terms(out, views.y, targets, cfg)
        total = total_loss(terms, targets, cfg)
    except dc.ShapeError:
        raise
    except (FloatingPointError, ValueError) as exc:
        # overflowing or collapsing activations surface here as non-finite
        # values or zero-norm embeddings
        raise TrainingDiverged(f"step {n}: numerical failure while building the loss ({exc})") from exc
    grads = dc.gradient(total, leaves.values(), allow_unused=True)
    grads = dict(zip(leaves, grads))
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        dump = {k: float(v.data) for k, v in terms.items()}
        raise TrainingDiverged(f"step {n}: non-finite gradient in {bad}; loss terms {dump}")

    lr = cosine_lr(n, cfg.steps, cfg.base_lr)
    decay_mask = {k: is_weight(k) for k in state.params.tensors}
    new_tensors, velocity = sgd_nesterov_step(
        state.params.tensors, grads, lr, cfg.momentum, cfg.weight_decay, state.velocity, decay_mask
    )
    params = ModelParams(state.params.arch, new_tensors)
    ema = ema_update(state.ema, params)

    metrics = {k: float(v.data) for k, v in terms.items()}
    metrics.update(step=n, lr=lr, loss_total=float(total.data))
    if targets.pseudo is not None:
        metrics["mask_ratio"] = float(targets.pseudo.mask.mean())
        known = views.u_hidden >= 0
        metrics["pl_error"] = (
            float(np.mean(targets.pseudo.hard[known] != views.u_hidden[known]) * 100)
            if known.any()
            else float("nan")
        )
        metrics["z_u_size"] = int(targets.keep.sum())
        if targets.agg is not None:
            metrics["agg_mask_ratio"] = float(targets.agg.mask.mean())
    else:
        metrics.update(mask_ratio=0.0, pl_error=float("nan"), z_u_size=0)

    new_state = TrainState(params, ema, targets.da, velocity, n + 1, state.rng, state.history)
    return new_state, metrics


@dataclass
class TrainResult:
    params: ModelParams
    ema: EmaState
    history: list[dict]
    state: TrainState


def train(
    cfg: TrainConfig,
    labeled: Dataset,
    unlabeled: Dataset,
    test: Dataset | None = None,
    callback=None,
) -> TrainResult:
    """Run ``cfg.steps`` steps. Test error is measured on the EMA model."""
    from .evaluation import evaluate

    state = init_state(cfg, labeled.dim, labeled.num_classes)
    stream_seed = np.random.SeedSequence(cfg.seed).spawn(3)[2]
    stream = BatchStream(labeled, unlabeled, cfg.batch_size, cfg.mu, np.random.default_rng(stream_seed))
    for n in range(cfg.steps):
        state, metrics = train_step(state, next(stream), cfg)
        done = n + 1
        evaluating = test is not None and (done % cfg.eval_every == 0 or done == cfg.steps)
        metrics["test_error_ema"] = evaluate(state.ema.shadow, test) if evaluating else float("nan")
        if evaluating or done % cfg.log_every == 0 or done == cfg.steps:
            state.history.append({k: metrics.get(k, float("nan")) for k in HISTORY_COLUMNS})
        if evaluating:
            log.info("step %d  test error (EMA) %.2f%%", done, metrics["test_error_ema"])
        if callback is not None:
            callback(state, metrics)
    return TrainResult(state.params, state.ema, state.history, state)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(",".join(HISTORY_COLUMNS) + "\n")
    for row in history:
        buf.write(",".join(_fmt(row[c]) for c in HISTORY_COLUMNS) + "\n")
    return buf.getvalue()


def ablation_variants(cfg: TrainConfig) -> dict[str, TrainConfig]:
    """Configs for the component ablations and the two baselines."""
    return {
        "dualmatch": cfg,
        "wo_ad": cfg.replace(lambda_scl=0.0),
        "wo_agg": cfg.replace(lambda_agg=0.0, k_neighbors=0),
        "wo_labeled": cfg.replace(z_labeled_views=0),
        "wo_unlabeled": cfg.replace(z_unlabeled_strong=False),
        "w_multi": cfg.replace(z_labeled_views=2, z_unlabeled_weak=True, z_unlabeled_strong=True),
        "single_level": cfg.replace(lambda_scl=0.0, lambda_agg=0.0, k_neighbors=0),
        "supervised": cfg.replace(lambda_u=0.0, lambda_scl=0.0, lambda_agg=0.0, k_neighbors=0),
    }
