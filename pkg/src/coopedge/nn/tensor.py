"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Every operation that touches a tensor requiring gradients records a node with
its parents and a backward closure. ``Tensor.backward`` walks the recorded
graph in reverse topological order. Operations whose inputs are all constants
are evaluated eagerly and leave nothing on the tape.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

LN2 = float(np.log(2.0))

_recording = True


@contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    global _recording
    previous, _recording = _recording, False
    try:
        yield
    finally:
        _recording = previous

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    # ------------------------------------------------------------------ info
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

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    # -------------------------------------------------------------- backward
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor with no recorded graph")
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of an op; record it on the tape when needed.

    This is also the hook for surrogate-gradient nodes: the caller supplies any
    backward rule, not necessarily the true derivative of the forward map.
    """
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced in forward pass")
    parents = tuple(parents)
    out = Tensor(data)
    if _recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient 0 at exactly 0
    return record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return record(t, (x,), lambda g: (g * (1.0 - t * t),))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x: Tensor) -> Tensor:
    return record(np.logaddexp(0.0, x.data), (x,), lambda g: (g * sigmoid_np(x.data),))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log of a nonpositive value")
    return record(np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x: Tensor) -> Tensor:
    return record(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


# ------------------------------------------------------------------ reductions
def sum_(x: Tensor, axis=None) -> Tensor:
    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(x.data.sum(axis=axis), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / count)


# ------------------------------------------------------------------ structure
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.ndim == 1 and b.ndim == 2:
            return b.data @ g, np.outer(a.data, g)
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return record(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = W x + b for x of shape [in] or a batch [B, in]; W is [out, in]."""
    if weight.ndim != 2 or bias.shape != (weight.shape[0],) or x.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"linear shape mismatch: W{weight.shape}, b{bias.shape}, x{x.shape}"
        )

    def backward(g):
        gx = g @ weight.data
        if x.ndim == 1:
            gw = np.outer(g, x.data)
            gb = g
        else:
            gw = g.T @ x.data
            gb = g.sum(axis=0)
        return gx, gw, gb

    return record(x.data @ weight.data.T + bias.data, (x, weight, bias), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return record(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def take(x: Tensor, index) -> Tensor:
    basic = all(isinstance(i, (slice, int)) for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return record(x.data[index], (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


# --------------------------------------------------------------------- losses
def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax_np(logits))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-example ``-log softmax(logits)[label]`` in nats.

    ``logits`` is [C] with an integer label, or [B, C] with B labels; the result
    is a scalar or a [B] vector respectively.
    """
    labels = np.asarray(labels)
    num_classes = logits.shape[-1]
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= num_classes):
        raise ValueError(f"labels must be integers in [0, {num_classes})")
    logp = log_softmax_np(logits.data)
    if logits.ndim == 1:
        loss = -logp[labels]
    else:
        loss = -logp[np.arange(labels.shape[0]), labels]

    def backward(g):
        grad = np.exp(logp)
        if logits.ndim == 1:
            grad[labels] -= 1.0
            return (grad * g,)
        grad[np.arange(labels.shape[0]), labels] -= 1.0
        return (grad * g[:, None],)

    return record(loss, (logits,), backward)


def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Scalar cross-entropy for a single example."""
    return cross_entropy(logits, np.int64(label))
