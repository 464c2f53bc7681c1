"""Dense tensors with reverse-mode differentiation on an explicit tape.

The canonical value is a 4-D array laid out as (batch, channel, height,
width); attention maps reuse the same container as (batch, row, col, col).
Scalars (losses) are rank-0.  Every differentiable operation records a
backward closure on the active :class:`Tape`; recording order is execution
order, so walking the tape in reverse visits nodes in reverse topological
order exactly once.  Gradients accumulate additively into ``Tensor.grad``.

Precision policy: float32 for training/inference, float64 for verification
(oracle and gradient tests).  Switch with :func:`set_default_dtype` or the
:func:`precision` context manager.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Param",
    "Tape",
    "NumericsError",
    "astensor",
    "set_default_dtype",
    "default_dtype",
    "set_check_finite",
    "precision",
    "concat",
    "reshape",
    "where_const",
]


class NumericsError(RuntimeError):
    """A tensor left the finite range (NaN/Inf is an error state)."""


_state = threading.local()


def _tls():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float32
        _state.tape = None
        _state.check_finite = False
    return _state


def set_default_dtype(dtype) -> None:
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _tls().dtype = dt.type


def default_dtype():
    return _tls().dtype


def set_check_finite(flag: bool) -> None:
    """Enable per-op finiteness assertions (tests / debugging)."""
    _tls().check_finite = bool(flag)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype ('f32'/'f64' or numpy dtype)."""
    names = {"f32": np.float32, "f64": np.float64}
    prev = default_dtype()
    set_default_dtype(names.get(dtype, dtype))
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """A dense array plus an optional same-shape gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        keep = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not keep:
            arr = arr.astype(default_dtype())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        if _tls().check_finite and not np.all(np.isfinite(arr)):
            raise NumericsError("non-finite values in tensor")

    # -- introspection --------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return _make(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- arithmetic ------------------------------------------------------
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

    def __pow__(self, p):
        return pow_scalar(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Param:
    """A trainable tensor with Adam moment buffers."""

    __slots__ = ("value", "adam_m", "adam_v", "step_count")

    def __init__(self, value):
        if not isinstance(value, Tensor):
            value = Tensor(value)
        value.requires_grad = True
        self.value = value
        self.adam_m = np.zeros_like(value.data)
        self.adam_v = np.zeros_like(value.data)
        self.step_count = 0

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.value.grad

    def zero_grad(self) -> None:
        self.value.grad = None


class Tape:
    """Ordered record of operations for one reverse-mode sweep.

    Use as a context manager; ops executed inside record backward
    closures.  ``backward(root)`` seeds ``root.grad`` and replays the
    records in reverse, accumulating into every participating tensor's
    ``grad``.
    """

    def __init__(self):
        self._nodes: list = []

    def __enter__(self) -> "Tape":
        tls = _tls()
        if tls.tape is not None:
            raise RuntimeError("a Tape is already active on this thread")
        tls.tape = self
        return self

    def __exit__(self, *exc):
        _tls().tape = None
        return False

    def _record(self, out: Tensor, backward) -> None:
        self._nodes.append((out, backward))

    def __len__(self):
        return len(self._nodes)

    def backward(self, root: Tensor, seed=None) -> None:
        for out, _ in self._nodes:
            if not (out is root):
                out.grad = None
        if seed is None:
            seed = np.ones_like(root.data)
        else:
            seed = np.asarray(seed, dtype=root.data.dtype)
            if seed.shape != root.data.shape:
                raise ValueError("seed shape must match root shape")
        root.grad = seed.copy()
        for out, backward in reversed(self._nodes):
            g = out.grad
            if g is None:
                continue  # branch not reaching the root
            backward(g)


# -- op plumbing ---------------------------------------------------------

def astensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Param):
        return x.value
    return Tensor(x)


def _make(data: np.ndarray, requires_grad: bool) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = requires_grad
    if _tls().check_finite and not np.all(np.isfinite(data)):
        raise NumericsError("non-finite values in op output")
    return t


def _finish(out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap op output; record `backward` if a tape is live and grads flow."""
    rg = any(t.requires_grad for t in inputs)
    out = _make(out_data, rg)
    tape = _tls().tape
    if tape is not None and rg:
        tape._record(out, backward)
    return out


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add `g` into t.grad (copy on first write: g may alias other buffers)."""
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic ops -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(g, b.data.shape))

    return _finish(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(-g, b.data.shape))

    return _finish(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _finish(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _finish(out, (a, b), backward)


def pow_scalar(a, p: float) -> Tensor:
    a = astensor(a)
    out = a.data ** p

    def backward(g):
        if a.requires_grad:
            accumulate(a, g * p * a.data ** (p - 1))

    return _finish(out, (a,), backward)


def texp(a) -> Tensor:
    a = astensor(a)
    out = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            accumulate(a, g * out)

    return _finish(out, (a,), backward)


def tlog(a) -> Tensor:
    a = astensor(a)
    out = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            accumulate(a, g / a.data)

    return _finish(out, (a,), backward)


def tsqrt(a) -> Tensor:
    a = astensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            accumulate(a, g * 0.5 / out)

    return _finish(out, (a,), backward)


def tabs(a) -> Tensor:
    a = astensor(a)
    out = np.abs(a.data)
    sign = np.sign(a.data)  # subgradient 0 at exactly 0

    def backward(g):
        if a.requires_grad:
            accumulate(a, g * sign)

    return _finish(out, (a,), backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.data.shape

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            accumulate(a, np.broadcast_to(g, in_shape))
            return
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(in_shape) for ax in axes)
        gg = g
        if not keepdims:
            for ax in sorted(axes):
                gg = np.expand_dims(gg, ax)
        accumulate(a, np.broadcast_to(gg, in_shape))

    return _finish(np.asarray(out), (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = astensor(a)
    in_shape = a.data.shape
    out = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            accumulate(a, g.reshape(in_shape))

    return _finish(out, (a,), backward)


def concat(tensors: Iterable, axis: int = 1) -> Tensor:
    ts = [astensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]

    def backward(g):
        start = 0
        for t, n in zip(ts, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, start + n)
                accumulate(t, g[tuple(idx)])
            start += n

    return _finish(out, ts, backward)


def where_const(cond: np.ndarray, a, b) -> Tensor:
    """Select elementwise by a constant boolean mask (no gradient on cond)."""
    a, b = astensor(a), astensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(np.where(cond, g, 0.0), a.data.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(np.where(cond, 0.0, g), b.data.shape))

    return _finish(out, (a, b), backward)
