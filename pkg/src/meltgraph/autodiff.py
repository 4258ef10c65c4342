"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded together
with the closures that map the output gradient to input gradients.
``Tape.backward`` replays the record in reverse order, summing gradients on
fan-out. Outside a tape the same functions just compute values, which is
what inference and finite-difference checks use.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import kernels

__all__ = [
    "Tensor", "Tape", "DimensionError", "as_tensor", "add", "sub", "mul", "matmul",
    "relu", "leaky_relu", "tanh", "concat", "gather", "segment_sum", "segment_softmax",
    "edge_attention", "spmm", "reshape", "tsum", "mean", "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def item(self):
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float(self.value)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _slice(self, key)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest, and only the innermost records.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.records = []

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    @classmethod
    def current(cls):
        return cls._stack[-1] if cls._stack else None

    def backward(self, loss: Tensor):
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.value)
        for out, parents, fn in reversed(self.records):
            if out.grad is None:
                continue
            for p, g in zip(parents, fn(out.grad)):
                if g is None or not p.requires_grad:
                    continue
                p.grad = g if p.grad is None else p.grad + g
        self.records.clear()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(value, parents, backward):
    out = Tensor(value)
    tape = Tape.current()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.records.append((out, parents, backward))
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _record(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _record(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _record(a.value * b.value, (a, b),
                   lambda g: (_unbroadcast(g * b.value, a.shape),
                              _unbroadcast(g * a.value, b.shape)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    return _record(a.value @ b.value, (a, b),
                   lambda g: (g @ b.value.T, a.value.T @ g))


def relu(x):
    x = as_tensor(x)
    mask = x.value > 0
    return _record(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope=0.2):
    x = as_tensor(x)
    factor = np.where(x.value > 0, 1.0, slope)
    return _record(x.value * factor, (x,), lambda g: (g * factor,))


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.value)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def identity(x):
    return as_tensor(x)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"concat along axis {axis}: shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(value, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def _slice(x, key):
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.value)
        full[key] = g
        return (full,)

    return _record(x.value[key], (x,), backward)


def reshape(x, shape):
    x = as_tensor(x)
    return _record(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def tsum(x, axis=None):
    x = as_tensor(x)
    value = x.value.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.asarray(value), (x,), backward)


def mean(x):
    x = as_tensor(x)
    n = x.size
    return _record(np.asarray(x.value.mean()), (x,),
                   lambda g: (np.full(x.shape, g.reshape(-1)[0] / n),))


def gather(x, index):
    """Rows ``x[index]``; the gradient scatters back with a segment sum."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    return _record(x.value[index], (x,), lambda g: (kernels.segment_sum(g, index, n),))


def segment_sum(x, segment_of, n_segments):
    """Row i of the result is the sum of rows of ``x`` whose segment is i."""
    x = as_tensor(x)
    seg = np.asarray(segment_of, dtype=np.int64)
    if seg.shape[0] != x.shape[0]:
        raise DimensionError(f"segment_sum: {x.shape[0]} rows but {seg.shape[0]} segment ids")
    if seg.size and (seg.min() < 0 or seg.max() >= n_segments):
        raise IndexError(f"segment_sum: segment ids must lie in [0, {n_segments})")
    return _record(kernels.segment_sum(x.value, seg, n_segments), (x,), lambda g: (g[seg],))


def segment_softmax(logits, segment_of, n_segments=None):
    """Softmax of ``logits`` within each segment (rows sharing a segment id).

    Works column-wise for 2-D logits (one column per attention head).
    """
    logits = as_tensor(logits)
    seg = np.asarray(segment_of, dtype=np.int64)
    if logits.shape[0] == 0:
        return _record(logits.value.copy(), (logits,), lambda g: (g,))
    if n_segments is None:
        n_segments = int(seg.max()) + 1
    shifted = logits.value - kernels.segment_max(logits.value, seg, n_segments)[seg]
    e = np.exp(shifted)
    y = e / kernels.segment_sum(e, seg, n_segments)[seg]

    def backward(g):
        dot = kernels.segment_sum(g * y, seg, n_segments)[seg]
        return (y * (g - dot),)

    return _record(y, (logits,), backward)


def edge_attention(q, k, v, etab, etype, src, dst, n_heads):
    """Fused multi-head attention over edges ``src -> dst``.

    Edge a carries the vector ``etab[etype[a]]``. Node i receives
    ``sum_j a_ij (v_j + e_ij)`` where ``a_ij`` is the softmax over edges into
    i of ``q_i . (k_j + e_ij) / sqrt(d_head)``, per head. Nodes without
    in-edges receive zeros.
    """
    q, k, v, etab = (as_tensor(t) for t in (q, k, v, etab))
    if not (q.shape == k.shape == v.shape) or etab.value.ndim != 2 or etab.shape[1] != q.shape[1]:
        raise DimensionError(f"edge_attention: q{q.shape} k{k.shape} v{v.shape} "
                             f"edge table {etab.shape}")
    if q.shape[1] % n_heads:
        raise DimensionError(f"edge_attention: {n_heads} heads do not divide width {q.shape[1]}")
    etype = np.asarray(etype, dtype=np.int64)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    out, alpha = kernels.attention_forward(q.value, k.value, v.value, etab.value, etype,
                                           src, dst, n_heads)
    return _record(out, (q, k, v, etab), lambda g: kernels.attention_backward(
        g, q.value, k.value, v.value, etab.value, etype, alpha, src, dst, n_heads))


def spmm(matrix, x):
    """Constant sparse matrix times dense tensor."""
    x = as_tensor(x)
    if matrix.shape[1] != x.shape[0]:
        raise DimensionError(f"spmm: shapes {matrix.shape} and {x.shape} are incompatible")
    mt = matrix.T.tocsr() if sp.issparse(matrix) else matrix.T
    return _record(np.asarray(matrix @ x.value), (x,), lambda g: (np.asarray(mt @ g),))


def grad_check(f, x, step=1e-5, floor=1e-6):
    """Max-norm relative error between reverse-mode and central differences.

    ``f`` maps a Tensor to a scalar Tensor. The error is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)``.
    The floor keeps a gradient that is exactly zero (a softmax-invariant
    bias, say) from dividing finite-difference roundoff by itself.
    """
    x = as_tensor(x)
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
    tape.backward(y)
    analytic = np.zeros_like(x.value) if x.grad is None else x.grad.copy()
    numeric = np.zeros_like(x.value)
    flat = x.value.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(x).item()
        flat[i] = orig - step
        down = f(x).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (up - down) / (2.0 * step)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max() / scale)
