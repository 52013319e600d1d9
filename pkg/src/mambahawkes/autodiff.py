"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a float64 array and records the operation that
produced it. Calling :meth:`Tensor.backward` on a scalar walks the recorded
graph once in reverse topological order and accumulates ``.grad`` on every
tensor that requires it.

Only the operations needed by the point-process and fusion models are
provided. Broadcasting follows numpy semantics; gradients are summed back
to the operand shapes.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # -- graph plumbing -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed requires a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.asarray(grad, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()
        # intermediate grads are not needed after the sweep
        for node in topo:
            if node._parents:
                node.grad = None

    # -- operator sugar -------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_factory) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_factory(out)
    return out


# -- elementwise binary ----------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def factory(out):
        def bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad, b.shape))
        return bw

    return _make(a.data + b.data, (a, b), factory)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def factory(out):
        def bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-out.grad, b.shape))
        return bw

    return _make(a.data - b.data, (a, b), factory)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def factory(out):
        def bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad * a.data, b.shape))
        return bw

    return _make(a.data * b.data, (a, b), factory)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def factory(out):
        def bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad / b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-out.grad * out.data / b.data, b.shape))
        return bw

    return _make(a.data / b.data, (a, b), factory)


def matmul(a, b, rowwise: bool = False) -> Tensor:
    """Matrix product with numpy ``@`` semantics (1-D operands supported).

    ``rowwise=True`` (for a 1-D or 2-D right operand) evaluates the forward
    product with einsum instead of BLAS. Each output row then has the same
    rounding whatever the number of rows, so results for a sequence prefix
    or a single sequence match the corresponding rows of a larger batch
    bit for bit.
    """
    a, b = as_tensor(a), as_tensor(b)

    def factory(out):
        def bw():
            g = out.grad
            ad, bd = a.data, b.data
            a2 = ad[None, :] if ad.ndim == 1 else ad
            b2 = bd[:, None] if bd.ndim == 1 else bd
            g2 = g
            if ad.ndim == 1:
                g2 = np.expand_dims(g2, -2)
            if bd.ndim == 1:
                g2 = np.expand_dims(g2, -1)
            if a.requires_grad:
                ga = g2 @ np.swapaxes(b2, -1, -2)
                if ad.ndim == 1:
                    ga = np.squeeze(ga, -2)
                a._accum(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.swapaxes(a2, -1, -2) @ g2
                if bd.ndim == 1:
                    gb = np.squeeze(gb, -1)
                b._accum(_unbroadcast(gb, b.shape))
        return bw

    if rowwise and b.ndim == 2:
        value = np.einsum("...k,kn->...n", a.data, b.data)
    elif rowwise and b.ndim == 1:
        value = np.einsum("...k,k->...", a.data, b.data)
    else:
        value = a.data @ b.data
    return _make(value, (a, b), factory)


# -- elementwise unary -----------------------------------------------------
def exp(x) -> Tensor:
    x = as_tensor(x)
    val = np.exp(x.data)

    def factory(out):
        def bw():
            x._accum(out.grad * val)
        return bw

    return _make(val, (x,), factory)


def log(x) -> Tensor:
    x = as_tensor(x)

    def factory(out):
        def bw():
            x._accum(out.grad / x.data)
        return bw

    return _make(np.log(x.data), (x,), factory)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    val = np.tanh(x.data)

    def factory(out):
        def bw():
            x._accum(out.grad * (1.0 - val * val))
        return bw

    return _make(val, (x,), factory)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def factory(out):
        def bw():
            x._accum(out.grad * mask)
        return bw

    return _make(np.where(mask, x.data, 0.0), (x,), factory)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    val = _sigmoid(x.data)

    def factory(out):
        def bw():
            x._accum(out.grad * val * (1.0 - val))
        return bw

    return _make(val, (x,), factory)


def square(x) -> Tensor:
    x = as_tensor(x)

    def factory(out):
        def bw():
            x._accum(out.grad * 2.0 * x.data)
        return bw

    return _make(x.data * x.data, (x,), factory)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    val = np.sqrt(x.data)

    def factory(out):
        def bw():
            x._accum(out.grad * 0.5 / val)
        return bw

    return _make(val, (x,), factory)


def softplus(x, beta) -> Tensor:
    """``beta * log(1 + exp(x / beta))``, differentiable in both arguments."""
    x, beta = as_tensor(x), as_tensor(beta)
    u = x.data / beta.data
    lse = np.logaddexp(0.0, u)
    sig = _sigmoid(u)

    def factory(out):
        def bw():
            g = out.grad
            if x.requires_grad:
                x._accum(_unbroadcast(g * sig, x.shape))
            if beta.requires_grad:
                beta._accum(_unbroadcast(g * (lse - u * sig), beta.shape))
        return bw

    return _make(beta.data * lse, (x, beta), factory)


def zoh_gain(a, delta, series_threshold: float = 1e-6) -> Tensor:
    """``expm1(delta * a) / a`` for nonzero ``a``; ``delta`` is a constant array.

    Below ``|delta * a| < series_threshold`` a third-order series is used so
    the value and its derivative in ``a`` stay accurate as ``delta -> 0``.
    """
    a = as_tensor(a)
    delta = np.asarray(delta.data if isinstance(delta, Tensor) else delta, dtype=np.float64)
    ad = a.data
    z = delta * ad
    small = np.abs(z) < series_threshold
    safe_z = np.where(small, 1.0, z)
    em1 = np.expm1(safe_z)
    val = np.where(small, delta * (1.0 + z / 2.0 + z * z / 6.0), em1 / ad * np.ones_like(z))
    # d/da [expm1(delta a)/a] = (delta a e^{delta a} - expm1(delta a)) / a^2
    dval = np.where(
        small,
        delta * delta * (0.5 + z / 3.0),
        (safe_z * (em1 + 1.0) - em1) / (ad * ad) * np.ones_like(z),
    )

    def factory(out):
        def bw():
            a._accum(_unbroadcast(out.grad * dval, a.shape))
        return bw

    return _make(val, (a,), factory)


# -- reductions / shape ----------------------------------------------------
def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)

    def factory(out):
        def bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            x._accum(np.broadcast_to(g, x.shape))
        return bw

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), factory)


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[ax] for ax in axes]))
    return div(tsum(x, axis=axis, keepdims=keepdims), float(count))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)

    def factory(out):
        def bw():
            x._accum(out.grad.reshape(x.shape))
        return bw

    return _make(x.data.reshape(shape), (x,), factory)


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)

    def factory(out):
        def bw():
            x._accum(np.swapaxes(out.grad, a1, a2))
        return bw

    return _make(np.swapaxes(x.data, a1, a2), (x,), factory)


def expand_dims(x, axis: int) -> Tensor:
    x = as_tensor(x)
    return reshape(x, np.expand_dims(x.data, axis).shape)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    basic = _is_basic_index(idx)

    def factory(out):
        def bw():
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            if basic:
                x.grad[idx] += out.grad
            else:
                np.add.at(x.grad, idx, out.grad)
        return bw

    return _make(x.data[idx], (x,), factory)


def concat(xs: Iterable, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def factory(out):
        def bw():
            ax = axis % out.grad.ndim
            for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
                if x.requires_grad:
                    sl = [slice(None)] * out.grad.ndim
                    sl[ax] = slice(lo, hi)
                    x._accum(out.grad[tuple(sl)])
        return bw

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, factory)


def stack(xs: Iterable, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]

    def factory(out):
        def bw():
            for i, x in enumerate(xs):
                if x.requires_grad:
                    x._accum(np.take(out.grad, i, axis=axis))
        return bw

    return _make(np.stack([x.data for x in xs], axis=axis), xs, factory)


# -- normalizations ----------------------------------------------------------
def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def factory(out):
        def bw():
            g = out.grad
            x._accum(s * (g - (g * s).sum(axis=axis, keepdims=True)))
        return bw

    return _make(s, (x,), factory)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True))
    val = x.data - lse
    s = np.exp(val)

    def factory(out):
        def bw():
            g = out.grad
            x._accum(g - s * g.sum(axis=axis, keepdims=True))
        return bw

    return _make(val, (x,), factory)


def layer_norm(x, scale, offset, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then apply ``scale`` and ``offset``."""
    x = as_tensor(x)
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(square(centered), axis=-1, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))
    return add(mul(normed, scale), offset)
