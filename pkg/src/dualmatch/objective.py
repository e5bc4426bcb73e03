"""Loss terms of the dual-level objective and the targets they train toward.

Targets (hard pseudo-labels, aggregated soft labels, masks) are computed from
plain arrays and enter the graph as constants; only the predictions and
embeddings they are compared with carry gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

DA_CAPACITY = 32


@dataclass(frozen=True)
class DaState:
    """Last ``capacity`` batch-mean predictions on weak unlabeled views."""

    history: tuple[np.ndarray, ...] = ()
    capacity: int = DA_CAPACITY

    def marginal(self, num_classes: int) -> np.ndarray:
        if not self.history:
            return np.full(num_classes, 1.0 / num_classes)
        return np.mean(np.stack(self.history), axis=0)

    def push(self, batch_mean: np.ndarray) -> "DaState":
        hist = (*self.history, np.array(batch_mean, dtype=np.float64))
        return DaState(hist[-self.capacity :], self.capacity)


@dataclass(frozen=True)
class PseudoLabels:
    hard: np.ndarray
    mask: np.ndarray
    aligned: np.ndarray


@dataclass(frozen=True)
class EmbeddingSet:
    z: dc.Tensor
    labels: np.ndarray
    origin: np.ndarray  # "labeled" / "unlabeled"

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class AggregatedLabels:
    q: np.ndarray
    mask: np.ndarray
    k: int


def _normalize_rows(a: np.ndarray) -> np.ndarray:
    return a / a.sum(axis=1, keepdims=True)


def _one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def supervised_loss(labels, p: dc.Tensor) -> dc.Tensor:
    """Mean cross-entropy between one-hot labels and predictions.

    ``labels`` may be class indices or a one-hot matrix.
    """
    if p.shape[0] == 0:
        raise ValueError("empty labeled batch")
    labels = np.asarray(labels)
    target = labels if labels.ndim == 2 else _one_hot(labels, p.shape[1])
    return dc.mean(dc.cross_entropy(target, p))


def distribution_align(p_w: np.ndarray, da: DaState) -> tuple[np.ndarray, DaState]:
    """Divide by the running marginal, renormalize, then record this batch."""
    p_w = np.asarray(p_w, dtype=np.float64)
    marginal = np.maximum(da.marginal(p_w.shape[1]), dc.CLAMP_EPS)
    aligned = _normalize_rows(p_w / marginal)
    return aligned, da.push(p_w.mean(axis=0))


def make_pseudo_labels(aligned: np.ndarray, tau: float) -> PseudoLabels:
    aligned = np.asarray(aligned, dtype=np.float64)
    # np.argmax returns the first maximum, i.e. ties go to the lowest class
    hard = np.argmax(aligned, axis=1)
    mask = aligned.max(axis=1) >= tau
    return PseudoLabels(hard, mask, aligned)


def _masked_mean_ce(target: np.ndarray, mask: np.ndarray, p_s: dc.Tensor) -> dc.Tensor:
    n = p_s.shape[0]
    if target.shape[0] != n or mask.shape[0] != n:
        raise dc.ShapeError("target, mask and predictions disagree on batch size")
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        return dc.Tensor(0.0)
    ce = dc.cross_entropy(target[idx], dc.take(p_s, idx))
    return dc.mul(dc.sum(ce), 1.0 / n)


def unsupervised_loss(pl: PseudoLabels, p_s: dc.Tensor) -> dc.Tensor:
    """Masked hard-label cross-entropy on strong views, divided by mu*B."""
    return _masked_mean_ce(_one_hot(pl.hard, p_s.shape[1]), pl.mask, p_s)


def confident_raw(p_w: np.ndarray, tau: float) -> np.ndarray:
    """Admission test for unlabeled embeddings: raw max(p_w) strictly above tau."""
    return np.asarray(p_w).max(axis=1) > tau


def build_embedding_set(
    z_x: dc.Tensor | None,
    y: np.ndarray | None,
    z_s: dc.Tensor | None,
    pl: PseudoLabels | None,
    keep: np.ndarray | None = None,
    extra: tuple[tuple[dc.Tensor, np.ndarray, str], ...] = (),
) -> EmbeddingSet:
    """Z = Z_x (all labeled embeddings, true labels) + Z_u (kept strong
    unlabeled embeddings with their pseudo-labels).

    Passing ``None`` for either side drops it. ``extra`` appends further
    (embeddings, labels, origin) groups, e.g. additional views.
    """
    parts: list[tuple[dc.Tensor, np.ndarray, str]] = []
    if z_x is not None:
        parts.append((z_x, np.asarray(y, dtype=np.int64), "labeled"))
    if z_s is not None:
        if pl is None:
            raise ValueError("unlabeled embeddings need pseudo-labels")
        keep = pl.mask if keep is None else np.asarray(keep, dtype=bool)
        idx = np.flatnonzero(keep)
        if len(idx):
            parts.append((dc.take(z_s, idx), pl.hard[idx], "unlabeled"))
    parts.extend(p for p in extra if len(p[1]))
    if not parts:
        return EmbeddingSet(dc.Tensor(np.zeros((0, 1))), np.zeros(0, np.int64), np.zeros(0, "<U9"))
    z = parts[0][0] if len(parts) == 1 else dc.concat([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts]).astype(np.int64)
    origin = np.concatenate([np.full(len(p[1]), p[2], dtype="<U9") for p in parts])
    return EmbeddingSet(z, labels, origin)


def contrastive_matrix(labels) -> np.ndarray:
    """w_ij = 1 when labels match and i != j, else 0."""
    labels = np.asarray(labels)
    w = (labels[:, None] == labels[None, :]).astype(np.float64)
    np.fill_diagonal(w, 0.0)
    return w


def similarity_matrix(z) -> dc.Tensor:
    """Pairwise cosine similarities of the rows of ``z``."""
    zn = dc.l2_normalize(z if isinstance(z, dc.Tensor) else dc.Tensor(z))
    return dc.matmul(zn, dc.transpose(zn))


def scl_loss(w_scl: np.ndarray, s: dc.Tensor, t: float, reduction: str = "sum") -> dc.Tensor:
    """Supervised InfoNCE over all anchors.

    For anchor i with P_i = sum_j w_ij > 0 positives:
        -(1/P_i) sum_j w_ij [ s_ij/t - log sum_{a != i} exp(s_ia/t) ]
    Anchors without positives contribute nothing. ``reduction="mean"``
    divides the sum by the number of embeddings |Z|.
    """
    if t <= 0:
        raise ValueError("temperature must be positive")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    w_scl = np.asarray(w_scl, dtype=np.float64)
    n = w_scl.shape[0]
    positives = w_scl.sum(axis=1)
    has_pos = positives > 0
    if n < 2 or not has_pos.any():
        return dc.Tensor(0.0)
    inv_pos = np.where(has_pos, 1.0 / np.where(has_pos, positives, 1.0), 0.0)
    logits = dc.mul(s, 1.0 / t)
    # shift by the largest attainable logit (cosine <= 1) for stability
    shift = 1.0 / t
    off_diag = 1.0 - np.eye(n)
    denom = dc.sum(dc.mul(dc.exp(dc.sub(logits, shift)), off_diag), axis=1)
    log_denom = dc.add(dc.log(denom), shift)
    pos_term = dc.sum(dc.mul(logits, w_scl * inv_pos[:, None]), axis=1)
    per_anchor = dc.sub(dc.mul(log_denom, has_pos.astype(np.float64)), pos_term)
    total = dc.sum(per_anchor)
    return dc.mul(total, 1.0 / n) if reduction == "mean" else total


def aggregate_pseudo(
    z_w: np.ndarray, p_w: np.ndarray, k: int, tau1: float = 0.9
) -> AggregatedLabels:
    """Soft labels from each sample's K most similar batch neighbours.

    q_b = normalize((1/K) sum_k max(sim(z_b, z_k), 0) * p_k), where the
    neighbours include b itself. Rows whose clamped weights are all zero
    cannot be normalized; they get q_b = 0 and are masked out.
    """
    z_w = np.asarray(z_w, dtype=np.float64)
    p_w = np.asarray(p_w, dtype=np.float64)
    n = z_w.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"K must lie in [1, {n}], got {k}")
    zn = z_w / np.linalg.norm(z_w, axis=1, keepdims=True)
    sim = zn @ zn.T
    # rank on similarities rounded to 12 decimals so that duplicate embeddings
    # tie exactly; each sample ranks itself first, and the stable sort breaks
    # the remaining ties toward the lowest index
    rank = np.round(sim, 12)
    np.fill_diagonal(rank, np.inf)
    nbr = np.argsort(-rank, axis=1, kind="stable")[:, :k]
    weights = np.maximum(np.take_along_axis(sim, nbr, axis=1), 0.0)
    q = np.einsum("bk,bkc->bc", weights, p_w[nbr]) / k
    total = q.sum(axis=1)
    valid = total > 0
    q = np.where(valid[:, None], q / np.where(valid, total, 1.0)[:, None], 0.0)
    mask = valid & (q.max(axis=1) >= tau1)
    return AggregatedLabels(q, mask, k)


def aggregation_loss(agg: AggregatedLabels, p_s: dc.Tensor) -> dc.Tensor:
    """Masked soft-label cross-entropy on strong views, divided by mu*B."""
    return _masked_mean_ce(agg.q, agg.mask, p_s)


def overall_loss(
    loss_x, loss_u, loss_scl, loss_agg, lambda_u: float, lambda_scl: float, lambda_agg: float
) -> dc.Tensor:
    if min(lambda_u, lambda_scl, lambda_agg) < 0:
        raise ValueError("loss weights must be non-negative")
    total = loss_x
    for term, weight in ((loss_u, lambda_u), (loss_scl, lambda_scl), (loss_agg, lambda_agg)):
        if weight != 0:
            total = dc.add(total, dc.mul(term, weight))
    return total
