"""Small reverse-mode autodiff over float64 numpy arrays.

Every op returns a new immutable :class:`Tensor` that remembers its parents
and a closure mapping the upstream gradient to one gradient per parent.
:func:`gradient` walks that graph; it never mutates the tensors, so calling
it twice on the same loss gives identical results.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

CLAMP_EPS = 1e-12
NORM_EPS = 1e-12
DIST_TOL = 1e-6


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "parents", "backward", "requires_grad", "name")

    def __init__(
        self,
        data,
        parents: Sequence["Tensor"] = (),
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        arr.setflags(write=False)
        self.data = arr
        self.parents = tuple(parents)
        self.backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)


def leaf(data, name: str | None = None) -> Tensor:
    """A trainable tensor: gradients are tracked with respect to it."""
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) and not data.requires_grad else Tensor(_raw(data))


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def _raw(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _node(value: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if not any(p.requires_grad for p in parents):
        return Tensor(value)
    return Tensor(value, parents, backward)


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return _node(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / b.data**2, b.shape),
        ),
    )


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x: Tensor, clamp: float | None = None) -> Tensor:
    """Natural log. With ``clamp`` the input is first clipped to [clamp, inf);
    the clipped entries get zero gradient."""
    if clamp is None:
        if np.any(x.data <= 0):
            raise NonFiniteError("log of non-positive value")
        return _node(np.log(x.data), (x,), lambda g: (g / x.data,))
    clipped = np.maximum(x.data, clamp)
    live = x.data > clamp
    return _node(np.log(clipped), (x,), lambda g: (np.where(live, g / clipped, 0.0),))


def relu(x: Tensor) -> Tensor:
    live = x.data > 0
    return _node(np.where(live, x.data, 0.0), (x,), lambda g: (g * live,))


# -- reductions and shape ----------------------------------------------------


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _node(out, (x,), back)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def transpose(x: Tensor) -> Tensor:
    return _node(x.data.T, (x,), lambda g: (g.T,))


def take(x: Tensor, idx) -> Tensor:
    """Row selection (``x[idx]``); repeated indices accumulate gradient."""
    idx = np.asarray(idx) if not isinstance(idx, (int, slice)) else idx
    out = x.data[idx]

    def back(g):
        full = np.zeros_like(x.data)
        if isinstance(idx, (int, slice)):
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node(out, (x,), back)


def concat(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=0)
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _node(out, parts, back)


# -- linear algebra and nn primitives -----------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data
    return _node(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def softmax(logits) -> Tensor:
    """Row-wise softmax of an ``n x C`` (or length-``C``) tensor."""
    x = _as_tensor(logits)
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("softmax of non-finite logits")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (x,), back)


def l2_normalize(v) -> Tensor:
    """Scale each row (or the single vector) to unit L2 norm."""
    x = _as_tensor(v)
    with np.errstate(over="ignore"):
        norm = np.sqrt((x.data**2).sum(axis=-1, keepdims=True))
    if not np.all(np.isfinite(norm)):
        raise NonFiniteError("vector norm overflowed")
    if np.any(norm <= NORM_EPS):
        raise ValueError("cannot normalize a vector with near-zero norm")
    y = x.data / norm

    def back(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _node(y, (x,), back)


def _check_distribution(arr: np.ndarray, what: str) -> None:
    if np.any(arr < 0):
        raise ValueError(f"{what} has negative entries")
    if np.any(np.abs(arr.sum(axis=-1) - 1.0) > DIST_TOL):
        raise ValueError(f"{what} rows do not sum to 1")


def cross_entropy(target, pred) -> Tensor:
    """H(target, pred) = -sum_c target_c log pred_c.

    Accepts single distributions (returns a scalar) or ``n x C`` batches
    (returns one value per row). ``pred`` is clamped to [1e-12, 1] before the
    log. ``target`` may itself be a tracked tensor.
    """
    target, pred = _as_tensor(target), _as_tensor(pred)
    if target.shape != pred.shape:
        raise ShapeError(f"cross_entropy shape mismatch: {target.shape} vs {pred.shape}")
    _check_distribution(target.data, "target")
    _check_distribution(pred.data, "pred")
    return -sum(mul(target, log(pred, clamp=CLAMP_EPS)), axis=-1)


# -- backprop ----------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def gradient(
    loss: Tensor, leaves: Iterable[Tensor], allow_unused: bool = False
) -> list[np.ndarray]:
    """d(loss)/d(leaf) for each leaf, in the order given.

    A leaf the loss never touched is an error unless ``allow_unused``, in
    which case its gradient is zero.
    """
    leaves = list(leaves)
    if loss.data.ndim != 0:
        raise ShapeError(f"gradient needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    on_tape = {id(n) for n in order}
    for lf in leaves:
        if id(lf) not in on_tape and not allow_unused:
            raise KeyError(f"leaf {lf.name or lf!r} is not on the tape of this loss")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node.backward is not None else grads.get(id(node))
        if g is None or node.backward is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return [grads.get(id(lf), np.zeros_like(lf.data)) for lf in leaves]
