"""Dense tensors with a reverse-mode gradient tape.

Tensors wrap numpy arrays. Operations executed while a :class:`GradientTape`
is active, and touching at least one tracked tensor, append a node to that
tape; :func:`backward` replays the tape in reverse from a scalar loss.

Broadcasting is restricted to leading-dimension expansion: the smaller
operand's shape must be a suffix of the larger one's.

Precision is a process-wide switch (float32 by default, float64 for
gradient checking).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Sequence

import numpy as np

from . import kernels
from .errors import NumericFault, ShapeError, TapeError

_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_dtype = np.float32
_check_finite = False
_local = threading.local()


def set_precision(name: str) -> None:
    global _dtype
    if name not in _PRECISIONS:
        raise ValueError(f"precision must be one of {sorted(_PRECISIONS)}, got {name!r}")
    _dtype = _PRECISIONS[name]


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(name: str):
    previous = np.dtype(_dtype).name
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


@contextlib.contextmanager
def check_finite(enabled: bool = True):
    """Validate every forward result for NaN/Inf while active."""
    global _check_finite
    previous = _check_finite
    _check_finite = enabled
    try:
        yield
    finally:
        _check_finite = previous


class _Node:
    __slots__ = ("tape", "index", "parents", "backward_fn", "op")

    def __init__(self, tape, index, parents, backward_fn, op):
        self.tape = tape
        self.index = index
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


class GradientTape:
    """Append-only record of differentiable operations.

    Use as a context manager; tapes nest per thread and only the innermost
    one records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def _record(self, parents, backward_fn, op):
        node = _Node(self, len(self.nodes), parents, backward_fn, op)
        self.nodes.append(node)
        return node


def _current_tape():
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.array(data, dtype=dtype or _dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._node = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.name = None
        t._node = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def tracked(self):
        return self.requires_grad or self._node is not None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, as_tensor(other, like=self))

    def __radd__(self, other):
        return add(as_tensor(other, like=self), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other, like=self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, as_tensor(other, like=self))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return swapaxes(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _dtype
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _result(data, parents, backward_fn, op):
    if _check_finite and not np.isfinite(data).all():
        raise NumericFault(f"non-finite output from {op}", {"op": op})
    out = Tensor._wrap(data)
    tape = _current_tape()
    if tape is not None:
        for p in parents:
            if p.requires_grad or p._node is not None:
                out._node = tape._record(parents, backward_fn, op)
                break
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Gradients accumulate (``+=``) into existing ``.grad`` arrays.
    """
    node = loss._node
    if node is None:
        raise TapeError("backward() called on a tensor that is not on a gradient tape")
    if loss.size != 1:
        raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = node.tape
    pending = {node.index: np.ones_like(loss.data)}
    for i in range(node.index, -1, -1):
        g = pending.pop(i, None)
        if g is None:
            continue
        n = tape.nodes[i]
        for p, gp in zip(n.parents, n.backward_fn(g)):
            if gp is None:
                continue
            pn = p._node
            if pn is not None and pn.tape is tape:
                j = pn.index
                prev = pending.get(j)
                pending[j] = gp if prev is None else prev + gp
            elif p.requires_grad:
                if p.grad is None:
                    p.grad = np.array(gp, dtype=p.data.dtype, copy=True)
                else:
                    p.grad += gp


def _broadcast_shape(a, b, op):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if len(sa) >= len(sb) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"{op}: shapes {sa} and {sb} are not leading-dimension compatible")


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    ``b`` may be 2-D and is then shared across ``a``'s leading axes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            a2 = ad.reshape(-1, ad.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), bw, "matmul")


def swapaxes(a: Tensor, ax1: int = -1, ax2: int = -2) -> Tensor:
    return _result(np.swapaxes(a.data, ax1, ax2), (a,),
                   lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    tensors = tuple(tensors)
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(data, tensors, bw, "concat")


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        out[idx] = g
        return (out,)

    return _result(a.data[idx], (a,), bw, "getitem")


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.intp)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D table, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range for table with {table.shape[0]} rows")
    shape, dtype = table.shape, table.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _result(table.data[ids], (table,), bw, "gather_rows")


def softmax(x: Tensor, mask=None) -> Tensor:
    """Row softmax over the last axis; masked entries are exactly zero."""
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            np.broadcast_shapes(mask.shape, x.shape)
        except ValueError:
            raise ShapeError(f"softmax mask shape {mask.shape} does not fit {x.shape}") from None
    y = kernels.softmax_forward(x.data, mask)
    return _result(y, (x,), lambda g: (kernels.softmax_backward(y, g),), "softmax")


softmax_rows = softmax


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match width {d}")
    y, xhat, rstd = kernels.layer_norm_forward(x.data, gamma.data, beta.data, eps)
    gd = gamma.data

    def bw(g):
        gx, gg, gb = kernels.layer_norm_backward(g, xhat, rstd, gd)
        return gx, gg, gb

    return _result(y, (x, gamma, beta), bw, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    return _result(kernels.gelu_forward(xd), (x,), lambda g: (kernels.gelu_backward(xd, g),), "gelu")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0).astype(x.dtype), (x,),
                   lambda g: (np.where(pos, g, 0).astype(g.dtype),), "relu")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``p == 0``."""
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), bw, "sum")


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / a.size)


def cross_entropy(logits: Tensor, targets, weights=None, mask=None) -> Tensor:
    """Weighted sum over rows of ``-log softmax(logits)[row, target]``.

    ``mask`` marks legal classes per row; illegal classes get probability 0
    and zero gradient. A target must be legal in its row.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy needs 2-D logits, got {logits.shape}")
    x = logits.data
    n = x.shape[0]
    t = np.asarray(targets, dtype=np.intp)
    if t.shape != (n,):
        raise ShapeError(f"targets shape {t.shape} does not match {n} rows")
    w = np.ones(n, dtype=x.dtype) if weights is None else np.asarray(weights, dtype=x.dtype)
    rows = np.arange(n)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask[rows, t].all():
            raise ValueError("cross_entropy target falls on a masked class")
        xm = np.where(mask, x, -np.inf)
    else:
        xm = x
    m = xm.max(axis=1, keepdims=True)
    e = np.exp(xm - m)
    z = e.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(z[:, 0])
    loss = -(w * (x[rows, t] - lse)).sum()

    def bw(g):
        p = e / z
        gx = p * w[:, None]
        gx[rows, t] -= w
        return (gx * g,)

    return _result(np.asarray(loss, dtype=x.dtype), (logits,), bw, "cross_entropy")
