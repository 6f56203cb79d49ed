"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Everything model-side in this package is built from the primitives here.
Tensors are immutable under ops (no op mutates an input); the optimizer is the
single place that rebinds parameter storage, and it runs single-threaded.
Recording happens on the innermost active :class:`Tape` of the calling thread,
so independent threads can run forward passes with independent tapes.
"""

from __future__ import annotations

import itertools
import math
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "concat_cols",
    "reduce_sum",
    "reduce_mean",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "gelu",
    "exp",
    "log",
    "sqrt",
    "gather_rows",
    "repeat_rows",
    "AdamState",
    "adam_step",
    "numeric_gradient",
]

_node_ids = itertools.count(1)
_thread = threading.local()

# Reject NaN/Inf in user-constructed tensors. Internal op outputs skip the
# scan; non-finite values there are a bug surfaced by tests, not bad input.
CHECKED = True


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's contract."""


class Tensor:
    """Dense n-dimensional float64 array, row-major, optionally grad-tracked."""

    __slots__ = ("id", "data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if CHECKED and not np.all(np.isfinite(arr)):
            raise ValueError("tensor construction rejected non-finite values")
        self.id = next(_node_ids)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = object.__new__(cls)
        t.id = next(_node_ids)
        t.data = arr if arr.dtype == np.float64 else arr.astype(np.float64)
        t.requires_grad = requires_grad
        return t

    @classmethod
    def from_flat(cls, shape: Sequence[int], values: Iterable[float],
                  requires_grad: bool = False) -> "Tensor":
        arr = np.asarray(list(values), dtype=np.float64).reshape(tuple(shape))
        return cls(arr, requires_grad=requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all routing goes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_constant_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_constant_tensor(value, like: Tensor) -> Tensor:
    arr = np.broadcast_to(np.asarray(value, dtype=np.float64), like.shape).copy()
    return Tensor._wrap(arr, requires_grad=False)


class _Record:
    __slots__ = ("out_id", "input_ids", "vjp")

    def __init__(self, out_id, input_ids, vjp):
        self.out_id = out_id
        self.input_ids = input_ids
        self.vjp = vjp


class Tape:
    """Ordered record of primitive ops; single-owner, not shared across threads.

    Use as a context manager around the forward pass::

        with Tape() as tape:
            loss = reduce_mean(mul(x, x))
        grads = backward(tape, loss)
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_thread, "tapes", None)
        if stack is None:
            stack = _thread.tapes = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _thread.tapes.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)


def _active_tape() -> Tape | None:
    stack = getattr(_thread, "tapes", None)
    return stack[-1] if stack else None


def _make(out_arr: np.ndarray, inputs: Sequence[Tensor],
          vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    rg = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_arr, requires_grad=rg)
    tape = _active_tape()
    if rg and tape is not None:
        tape._records.append(_Record(out.id, tuple(t.id for t in inputs), vjp))
    return out


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    """Reverse-mode sweep over ``tape`` from scalar ``loss``.

    Returns a map node id -> gradient Tensor for every node touched by the
    sweep (leaves included). Gradients accumulate additively at fan-out.
    """
    if loss.data.size != 1:
        raise ShapeError(
            f"backward requires a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for rec in reversed(tape._records):
        gout = grads.get(rec.out_id)
        if gout is None:
            continue
        for in_id, g in zip(rec.input_ids, rec.vjp(gout)):
            if g is None:
                continue
            acc = grads.get(in_id)
            grads[in_id] = g if acc is None else acc + g
    return {nid: Tensor._wrap(arr, requires_grad=False)
            for nid, arr in grads.items()}


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(
        np.asarray(x, dtype=np.float64), requires_grad=False)


# ---------------------------------------------------------------------------
# elementwise binary ops (numpy broadcasting, gradients un-broadcast)

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                         _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                         _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data * b.data
    ad, bd = a.data, b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g * bd, a.shape),
                                         _unbroadcast(g * ad, b.shape)))


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data / b.data
    ad, bd = a.data, b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, a.shape),
                            _unbroadcast(-g * ad / (bd * bd), b.shape)))


def neg(a) -> Tensor:
    a = _coerce(a)
    return _make(-a.data, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product; backward dA = g.B^T, dB = A^T.g."""
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    a = _coerce(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.shape}")
    return _make(np.ascontiguousarray(a.data.T), (a,),
                 lambda g: (np.ascontiguousarray(g.T),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _coerce(a)
    old = a.shape
    return _make(a.data.reshape(tuple(shape)), (a,),
                 lambda g: (g.reshape(old),))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along the last axis."""
    parts = [_coerce(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(
            f"concat_cols row counts differ: {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    out = np.concatenate([p.data for p in parts], axis=1)
    return _make(out, parts, vjp)


# ---------------------------------------------------------------------------
# reductions

def reduce_sum(a: Tensor, axis: int | None = None,
               keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def reduce_mean(a: Tensor, axis: int | None = None,
                keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    shape = a.shape
    count = a.data.size if axis is None else shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape) / count,)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape) / count,)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp)


# ---------------------------------------------------------------------------
# nonlinearities and normalization

def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, computed with max subtraction."""
    x = _coerce(x)
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return ((g - (g * y).sum(axis=1, keepdims=True)) * y,)

    return _make(y, (x,), vjp)


def log_softmax_rows(x: Tensor) -> Tensor:
    x = _coerce(x)
    if x.data.ndim != 2:
        raise ShapeError(f"log_softmax_rows needs a 2-D tensor, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def vjp(g):
        return (g - sm * g.sum(axis=1, keepdims=True),)

    return _make(out, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    d = x.shape[-1]
    if d < 1 or eps <= 0:
        raise ValueError("layer_norm requires d >= 1 and eps > 0")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine params must have shape ({d},), got "
            f"{gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data
    gdat = gamma.data

    def vjp(g):
        gy = g * gdat
        dx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                    - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), vjp)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = _coerce(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return _make(out, (x,), vjp)


def exp(x: Tensor) -> Tensor:
    x = _coerce(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    x = _coerce(x)
    if np.any(x.data <= 0):
        raise ValueError("log requires strictly positive input")
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    x = _coerce(x)
    if np.any(x.data < 0):
        raise ValueError("sqrt requires non-negative input")
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------------------
# indexing / upsampling

def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Select rows ``table[ids]``; backward scatter-adds into the table."""
    table = _coerce(table)
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D table, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows ids must be a 1-D integer sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"gather_rows id out of range for table with {table.shape[0]} rows")
    tshape = table.shape

    def vjp(g):
        acc = np.zeros(tshape)
        np.add.at(acc, idx, g)
        return (acc,)

    return _make(table.data[idx], (table,), vjp)


def repeat_rows(x: Tensor, counts: Sequence[int]) -> Tensor:
    """Repeat row t of ``x`` counts[t] times, order preserved."""
    x = _coerce(x)
    if x.data.ndim != 2:
        raise ShapeError(f"repeat_rows needs a 2-D tensor, got {x.shape}")
    cnt = np.asarray(counts, dtype=np.int64)
    if cnt.shape != (x.shape[0],):
        raise ShapeError(
            f"repeat_rows needs one count per row: {x.shape[0]} rows, "
            f"{cnt.size} counts")
    if np.any(cnt < 1):
        raise ValueError("repeat_rows counts must all be >= 1")
    offsets = np.concatenate(([0], np.cumsum(cnt)[:-1]))

    def vjp(g):
        return (np.add.reduceat(g, offsets, axis=0),)

    return _make(np.repeat(x.data, cnt, axis=0), (x,), vjp)


# ---------------------------------------------------------------------------
# optimizer

class AdamState:
    """First/second moment accumulators plus a per-parameter step counter."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}


def adam_step(params: Mapping[str, Tensor],
              grads: Mapping[str, "Tensor | np.ndarray"],
              state: AdamState,
              lr: float = 1e-3,
              beta1: float = 0.9,
              beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """Standard Adam update with bias correction, applied in place.

    Only parameters named in ``grads`` are touched; everything else stays
    bit-identical (this is what keeps unrouted branches frozen).
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        p = params[name]
        garr = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if garr.shape != p.shape:
            raise ShapeError(
                f"gradient shape {garr.shape} does not match parameter "
                f"{name!r} shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
            state.t[name] = 0
        v = state.v[name]
        state.t[name] += 1
        t = state.t[name]
        m *= beta1
        m += (1.0 - beta1) * garr
        v *= beta2
        v += (1.0 - beta2) * garr * garr
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)
    return state


# ---------------------------------------------------------------------------
# independent oracle: central finite differences

def numeric_gradient(f: Callable[[], float], tensor: Tensor,
                     step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f()`` w.r.t. ``tensor``.

    ``f`` must recompute from ``tensor.data`` on every call. This helper never
    touches the tape, so it stays an independent check of reverse mode.
    """
    flat = tensor.data.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(tensor.shape)
