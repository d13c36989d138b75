"""Minimal reverse-mode automatic differentiation over NumPy arrays.

A Tensor wraps an ndarray and remembers how it was produced; backward() walks
the recorded graph in reverse topological order and accumulates gradients
into every requires_grad leaf. Training runs in float32; gradient checking
uses float64 because central differences are unreliable in single precision.
"""

from __future__ import annotations

import contextlib
import math
import threading

import numpy as np

_state = threading.local()
_nan_trap = False


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def set_nan_trap(enabled: bool) -> None:
    """When enabled, every primitive raises on non-finite forward values."""
    global _nan_trap
    _nan_trap = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev: tuple = ()

    # -- plumbing ----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss; accumulates into .grad."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))
        _accum(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -_as_array(other, self.dtype))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _as_array(value, dtype):
    return np.asarray(value, dtype=dtype)


def _wrap_const(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(_as_array(value, like.dtype))


def _accum(t: Tensor, g: np.ndarray) -> None:
    t.grad = g if t.grad is None else t.grad + g


def _make(out_data, parents, backward):
    """Build the output tensor; records the edge only when grads can flow."""
    if _nan_trap and not np.isfinite(out_data).all():
        raise FloatingPointError(f"non-finite values in {backward.__qualname__.split('.')[0]}")
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=track)
    if track:
        out._prev = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over the dims that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- primitives -------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _wrap_const(b, a)
    out_data = a.data + b.data

    def backward():
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(out.grad, b.data.shape))

    out = _make(out_data, (a, b), backward)
    return out


def mul(a: Tensor, b) -> Tensor:
    b = _wrap_const(b, a)
    out_data = a.data * b.data

    def backward():
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(out.grad * a.data, b.data.shape))

    out = _make(out_data, (a, b), backward)
    return out


def div(a: Tensor, b) -> Tensor:
    b = _wrap_const(b, a)
    out_data = a.data / b.data

    def backward():
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape))

    out = _make(out_data, (a, b), backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; both operands must have ndim >= 2."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul requires ndim >= 2 on both sides")
    out_data = a.data @ b.data

    def backward():
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ out.grad, b.data.shape))

    out = _make(out_data, (a, b), backward)
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    out_data = np.transpose(a.data, axes)
    inverse = np.argsort(axes) if axes is not None else None

    def backward():
        if a.requires_grad:
            _accum(a, np.transpose(out.grad, inverse))

    out = _make(out_data, (a,), backward)
    return out


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out_data = a.data.reshape(shape)

    def backward():
        if a.requires_grad:
            _accum(a, out.grad.reshape(a.data.shape))

    out = _make(out_data, (a,), backward)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * out.grad.ndim
                index[axis] = slice(lo, hi)
                _accum(t, out.grad[tuple(index)])

    out = _make(out_data, tuple(tensors), backward)
    return out


def take(a: Tensor, idx) -> Tensor:
    """Basic/advanced indexing; backward scatter-adds into the source."""
    out_data = a.data[idx]

    def backward():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            _accum(a, g)

    out = _make(np.ascontiguousarray(out_data), (a,), backward)
    return out


def take_rows(table: Tensor, indices) -> Tensor:
    """Embedding lookup: rows of a 2-D table by integer index array."""
    indices = np.asarray(indices, dtype=np.int64)
    return take(table, indices)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward():
        if a.requires_grad:
            y = out.data
            dot = (out.grad * y).sum(axis=axis, keepdims=True)
            _accum(a, y * (out.grad - dot))

    out = _make(out_data, (a,), backward)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_tanh(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward():
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
            _accum(a, out.grad * local)

    out = _make(out_data, (a,), backward)
    return out


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * sig

    def backward():
        if a.requires_grad:
            local = sig * (1.0 + a.data * (1.0 - sig))
            _accum(a, out.grad * local)

    out = _make(out_data, (a,), backward)
    return out


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward():
        if a.requires_grad:
            _accum(a, out.grad / a.data)

    out = _make(out_data, (a,), backward)
    return out


def square(a: Tensor) -> Tensor:
    out_data = a.data * a.data

    def backward():
        if a.requires_grad:
            _accum(a, out.grad * 2.0 * a.data)

    out = _make(out_data, (a,), backward)
    return out


def _restore_axes(g: np.ndarray, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return g


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward():
        if a.requires_grad:
            g = _restore_axes(out.grad, axis, keepdims)
            _accum(a, np.broadcast_to(g, a.data.shape).copy())

    out = _make(np.asarray(out_data), (a,), backward)
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[i] for i in np.atleast_1d(axis)])

    def backward():
        if a.requires_grad:
            g = _restore_axes(out.grad, axis, keepdims)
            _accum(a, np.broadcast_to(g, a.data.shape) / count)

    out = _make(np.asarray(out_data), (a,), backward)
    return out


# -- gradient checking -------------------------------------------------------


def gradcheck(f, inputs, eps: float = 1e-4) -> float:
    """Max relative error between tape gradients and central differences.

    ``inputs`` are float64 leaves with requires_grad=True; ``f`` maps them to
    a scalar Tensor. Relative error per element is
    |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    inputs = list(inputs)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("gradcheck requires float64 inputs")
        t.grad = None
    loss = f(*inputs)
    loss.backward()
    worst = 0.0
    for t in inputs:
        g_ad = np.zeros_like(t.data) if t.grad is None else t.grad
        flat_data = t.data.reshape(-1)
        flat_grad = g_ad.reshape(-1)
        for i in range(flat_data.size):
            saved = flat_data[i]
            with no_grad():
                flat_data[i] = saved + eps
                f_plus = f(*inputs).data.item()
                flat_data[i] = saved - eps
                f_minus = f(*inputs).data.item()
            flat_data[i] = saved
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(flat_grad[i] - g_fd) / max(1e-8, abs(flat_grad[i]) + abs(g_fd))
            worst = max(worst, rel)
    return worst
