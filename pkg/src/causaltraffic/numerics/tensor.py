"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient (and grad mode is on) the result remembers its parents and a closure
that pushes the upstream gradient back to them. Calling ``backward`` on a
scalar walks the graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + ", ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(ValueError):
    """A tensor value contains NaN or infinity."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NonFiniteError(f"{where}: non-finite value at index {tuple(int(i) for i in bad)}")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation graph.

    Attributes:
        value: read-only float64 array.
        grad: accumulated gradient (same shape as ``value``) or ``None``
            before any backward pass reached this node.
        requires_grad: whether gradients are tracked for this node.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.array(value, dtype=np.float64)
        _check_finite(arr, name or "Tensor")
        self.value = _freeze(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @classmethod
    def _result(cls, value: np.ndarray, parents: tuple["Tensor", ...], op: str,
                backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> "Tensor":
        if not isinstance(value, np.ndarray) or value.dtype != np.float64:
            value = np.array(value, dtype=np.float64)
        _check_finite(value, op)
        out = cls.__new__(cls)
        out.value = _freeze(value)
        out.grad = None
        out.name = None
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = parents

            def _bw(g: np.ndarray) -> None:
                grads = backward(g)
                for p, pg in zip(parents, grads):
                    if pg is None or not p.requires_grad:
                        continue
                    if p.grad is None:
                        p.grad = np.array(pg, dtype=np.float64, copy=True).reshape(p.value.shape)
                    else:
                        p.grad += pg

            out._backward = _bw
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this node into every reachable leaf."""
        if grad is None:
            if self.value.size != 1:
                raise ShapeError("backward", self.shape, detail="implicit gradient needs a scalar")
            grad = np.ones_like(self.value)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.array(grad, dtype=np.float64).reshape(self.shape) + (
            self.grad if self.grad is not None else 0.0)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # free the graph; leaves keep their gradients
        for node in order:
            if node._parents:
                node._parents = ()
                node._backward = None

    # -- operator sugar ---------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise binary ---------------------------------------------------

def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return Tensor._result(a.value + b.value, (a, b), "add",
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return Tensor._result(a.value - b.value, (a, b), "sub",
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return Tensor._result(
        a.value * b.value, (a, b), "mul",
        lambda g: (_unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
                   _unbroadcast(g * a.value, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.value == 0):
        raise NonFiniteError("div: division by zero")
    out = a.value / b.value
    return Tensor._result(
        out, (a, b), "div",
        lambda g: (_unbroadcast(g / b.value, a.shape) if a.requires_grad else None,
                   _unbroadcast(-g * out / b.value, b.shape) if b.requires_grad else None))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.value, (a,), "neg", lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.value ** p, (a,), "power",
                          lambda g: (g * p * a.value ** (p - 1),))


# -- elementwise unary ----------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return Tensor._result(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.value <= 0):
        raise NonFiniteError("log: non-positive argument")
    return Tensor._result(np.log(a.value), (a,), "log", lambda g: (g / a.value,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return Tensor._result(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.value)
    return Tensor._result(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.value > 0
    return Tensor._result(np.where(pos, a.value, 0.0), (a,), "relu", lambda g: (g * pos,))


def xlogx(a) -> Tensor:
    """Elementwise ``x * log(x)`` for ``x >= 0`` with ``0 * log 0 := 0``."""
    a = as_tensor(a)
    if np.any(a.value < 0):
        raise NonFiniteError("xlogx: negative argument")
    pos = a.value > 0
    safe = np.where(pos, a.value, 1.0)
    out = np.where(pos, a.value * np.log(safe), 0.0)
    return Tensor._result(out, (a,), "xlogx",
                          lambda g: (np.where(pos, g * (np.log(safe) + 1.0), 0.0),))


def detach(a) -> Tensor:
    """Same values, no gradient flow."""
    a = as_tensor(a)
    return Tensor(a.value)


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.value, b.value)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                # fold the batch axes into one product instead of summing slices
                av = a.value.reshape(-1, a.shape[-1])
                gb = av.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._result(out, (a, b), "matmul", bw)


# -- reductions and shape -------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.value.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return Tensor._result(np.asarray(out, dtype=np.float64), (a,), "sum", bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return Tensor._result(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return Tensor._result(np.ascontiguousarray(np.transpose(a.value, axes)), (a,), "transpose",
                          lambda g: (np.transpose(g, inv),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.value[idx]
    except IndexError as exc:
        raise ShapeError("slice", a.shape, detail=str(exc)) from None
    advanced = _is_advanced(idx)

    def bw(g):
        full = np.zeros(a.shape)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return Tensor._result(np.asarray(out, dtype=np.float64), (a,), "slice", bw)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", detail="no inputs")
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(ts)))

    return Tensor._result(out, tuple(ts), "concat", bw)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack", detail="no inputs")
    if any(t.shape != ts[0].shape for t in ts):
        raise ShapeError("stack", *[t.shape for t in ts])
    out = np.stack([t.value for t in ts], axis=axis)
    ax = axis % out.ndim
    return Tensor._result(out, tuple(ts), "stack",
                          lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(ts))))


# -- composite primitives with hand-written backward -----------------------

def masked_softmax(a, mask=None, axis: int = -1) -> Tensor:
    """Softmax of ``a + mask`` along ``axis``.

    ``mask`` is a plain array broadcastable to ``a`` holding 0 or -inf.
    Masked entries come out exactly 0; a row masked everywhere is all zeros.
    """
    a = as_tensor(a)
    x = a.value
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        try:
            np.broadcast_shapes(mask.shape, x.shape)
        except ValueError:
            raise ShapeError("masked_softmax", x.shape, mask.shape) from None
        bad = ~((mask == 0) | np.isneginf(mask))
        if bad.any():
            raise ValueError("masked_softmax: mask entries must be 0 or -inf")
        keep = np.broadcast_to(mask == 0, x.shape)
    else:
        keep = np.ones(x.shape, dtype=bool)
    shifted = np.where(keep, x, -np.inf)
    mx = shifted.max(axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    ex = np.where(keep, np.exp(np.where(keep, x - mx, 0.0)), 0.0)
    den = ex.sum(axis=axis, keepdims=True)
    out = np.divide(ex, den, out=np.zeros_like(ex), where=den > 0)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor._result(out, (a,), "masked_softmax", bw)


def softmax(a, axis: int = -1) -> Tensor:
    return masked_softmax(a, None, axis)


def layer_norm(a, gamma=None, beta=None, eps: float = 1e-10) -> Tensor:
    """Normalize over the last axis, then apply optional affine parameters."""
    a = as_tensor(a)
    d = a.shape[-1]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and as_tensor(p).shape != (d,):
            raise ShapeError("layer_norm", a.shape, as_tensor(p).shape, detail=name)
    mu = a.value.mean(axis=-1, keepdims=True)
    xc = a.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    out = Tensor._result(xhat, (a,), "layer_norm", bw)
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out
