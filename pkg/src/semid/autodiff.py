"""Reverse-mode automatic differentiation over dense float64 arrays.

Deliberately small engine for desk-scale models: every value is a
float64 numpy array, every differentiable operation records its parent
nodes together with a backward closure, and :func:`backward` on a
scalar loss fills the ``grad`` fields by walking the recorded graph in
reverse topological order. There is no dtype zoo, no device handling
and no lazy evaluation; determinism and checkable gradients are the
whole point.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .exceptions import ContractError, DimensionError, ParameterError

__all__ = [
    "Tensor",
    "Parameter",
    "as_tensor",
    "constant",
    "no_grad",
    "backward",
    "stop_gradient",
    "stop_gradient_replay",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "square",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "matmul",
    "transpose",
    "reshape",
    "tensor_sum",
    "tensor_mean",
    "take_rows",
    "take_along_last",
    "softmax",
    "log_softmax",
    "logsumexp",
    "softmax_with_temperature",
]

_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    previous = _grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = previous


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ("name",)

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True)
        self.name = name

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = self.name or "?"
        return f"Parameter({label}, shape={self.data.shape})"


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def constant(value) -> Tensor:
    """Wrap an array as a non-trainable leaf."""
    return Tensor(value)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` for every reachable leaf.

    ``loss`` must be scalar. Gradients add onto whatever is already in
    ``grad``; training loops are expected to zero parameters first.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))

    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, grad in zip(node._parents, grads):
            if grad is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += grad


# ---------------------------------------------------------------------------
# stop-gradient


class StopGradientReplay:
    """Recorded stop-gradient values, replayable across graph rebuilds.

    Finite-difference checking of a graph containing sg[.] has to hold
    the sg inputs at their recorded values while parameters move: sg is
    the identity in the forward pass, so a naive FD would measure the
    very paths sg exists to block. The gradient checker records on the
    first build and replays on every perturbed rebuild.
    """

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._cursor: int | None = None  # None while recording

    def rewind(self) -> None:
        self._cursor = 0

    def _capture(self, value: np.ndarray) -> np.ndarray:
        if self._cursor is None:
            self._values.append(value.copy())
            return value
        if self._cursor >= len(self._values):
            raise ContractError("stop-gradient replay exhausted; graph structure changed")
        value = self._values[self._cursor]
        self._cursor += 1
        return value


def _current_replay() -> StopGradientReplay | None:
    return getattr(_STATE, "sg_replay", None)


@contextmanager
def stop_gradient_replay():
    if _current_replay() is not None:
        raise ContractError("stop-gradient replay contexts do not nest")
    replay = StopGradientReplay()
    _STATE.sg_replay = replay
    try:
        yield replay
    finally:
        _STATE.sg_replay = None


def stop_gradient(value) -> Tensor:
    """Forward identity, zero gradient."""
    data = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
    replay = _current_replay()
    if replay is not None:
        data = replay._capture(data)
    return Tensor(data.copy())


# ---------------------------------------------------------------------------
# elementwise and structural operations


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _node(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _node(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g / (2.0 * out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy ``matmul`` semantics (1-D promotion, stacking)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise DimensionError("matmul operands must be at least 1-D")
    a_vec = ad.ndim == 1
    b_vec = bd.ndim == 1
    ae = ad[None, :] if a_vec else ad
    be = bd[:, None] if b_vec else bd
    if ae.shape[-1] != be.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {ad.shape} @ {bd.shape}")
    oe = np.matmul(ae, be)
    out = oe
    if a_vec:
        out = out[..., 0, :]
    if b_vec:
        out = out[..., 0]

    def bwd(g):
        ge = np.asarray(g, dtype=np.float64)
        if b_vec:
            ge = ge[..., None]
        if a_vec:
            ge = ge[..., None, :]
        ga = _unbroadcast(np.matmul(ge, be.swapaxes(-1, -2)), ae.shape)
        gb = _unbroadcast(np.matmul(ae.swapaxes(-1, -2), ge), be.shape)
        if a_vec:
            ga = ga[0]
        if b_vec:
            gb = gb[:, 0]
        return ga, gb

    return _node(out, (a, b), bwd)


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inverse = None
    else:
        inverse = tuple(int(i) for i in np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inverse),)

    return _node(out, (a,), bwd)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(a.data.shape),))


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        return (_expand_reduced(np.asarray(g), a.data.shape, axis, keepdims),)

    return _node(out, (a,), bwd)


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def bwd(g):
        return (_expand_reduced(np.asarray(g), a.data.shape, axis, keepdims) / count,)

    return _node(out, (a,), bwd)


def take_rows(a, indices) -> Tensor:
    """Gather along the first axis; backward scatter-adds into the source."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ParameterError("take_rows indices must be integers")
    out = a.data[idx]

    def bwd(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return _node(out, (a,), bwd)


def take_along_last(a, indices) -> Tensor:
    """Pick one element along the last axis per leading position."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    if idx.shape != a.data.shape[:-1]:
        raise DimensionError(
            f"take_along_last indices shape {idx.shape} != leading shape {a.data.shape[:-1]}"
        )
    grids = tuple(np.indices(idx.shape))
    out = a.data[grids + (idx,)]

    def bwd(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, grids + (idx,), g)
        return (grad,)

    return _node(out, (a,), bwd)


# ---------------------------------------------------------------------------
# normalized exponentials (all numerically stabilized by max subtraction,
# which leaves the derivatives exact because the shift is locally constant)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ez = np.exp(shifted)
    out = ez / ez.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (a,), bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bwd(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), bwd)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    out_keep = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    out = out_keep if keepdims else np.squeeze(out_keep, axis=axis)
    weights = np.exp(a.data - out_keep)

    def bwd(g):
        ge = np.asarray(g)
        if not keepdims:
            ge = np.expand_dims(ge, axis)
        return (weights * ge,)

    return _node(out, (a,), bwd)


def softmax_with_temperature(logits, tau: float) -> Tensor:
    """softmax(logits / tau); tau must be positive."""
    if not np.isfinite(tau) or tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    scaled = mul(as_tensor(logits), 1.0 / float(tau))
    return softmax(scaled, axis=-1)
