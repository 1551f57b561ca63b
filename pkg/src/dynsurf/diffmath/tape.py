"""Reverse-mode gradient tape over numpy arrays.

Every `Var` records the op that produced it together with a closure mapping the
output cotangent to parent cotangents. Node ids come from a global counter, so
parents always carry smaller ids than their children and sorting by id gives a
topological order for free.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the tape (inference, importance sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Var:
    __slots__ = ("data", "grad", "parents", "backward_fn", "op", "id", "requires_grad", "name")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad = None
        self.parents: tuple[Var, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"
        self.id = next(_ids)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        label = self.name or self.op
        return f"Var({label}, shape={self.data.shape}, dtype={self.data.dtype})"

    def __len__(self):
        return len(self.data)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    # operators --------------------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def make_op(data, parents: Sequence[Var], backward_fn: Callable, op: str) -> Var:
    """Create an op node; `backward_fn(g)` returns one cotangent (or None) per parent."""
    out = Var(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.op = op
    else:
        out.op = op
    return out


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# elementwise binary ops (numpy broadcasting)


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_op(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make_op(out, (a, b), bw, "div")


def maximum(a, b) -> Var:
    """Elementwise max; ties send the gradient to `a`."""
    a, b = as_var(a), as_var(b)
    ad, bd = a.data, b.data
    pick_a = ad >= bd
    return make_op(np.maximum(ad, bd), (a, b),
                   lambda g: (unbroadcast(np.where(pick_a, g, 0.0), ad.shape),
                              unbroadcast(np.where(pick_a, 0.0, g), bd.shape)), "maximum")


def where(cond, a, b) -> Var:
    a, b = as_var(a), as_var(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return make_op(np.where(cond, a.data, b.data), (a, b),
                   lambda g: (unbroadcast(np.where(cond, g, 0.0), sa),
                              unbroadcast(np.where(cond, 0.0, g), sb)), "where")


# --------------------------------------------------------------------------
# unary ops


def neg(a) -> Var:
    a = as_var(a)
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Var:
    a = as_var(a)
    ad = a.data
    return make_op(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), f"pow{p}")


def square(a) -> Var:
    a = as_var(a)
    ad = a.data
    return make_op(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Var:
    a = as_var(a)
    ad = a.data
    return make_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Var:
    a = as_var(a)
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def vabs(a) -> Var:
    a = as_var(a)
    s = np.sign(a.data)
    return make_op(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def sigmoid(a) -> Var:
    a = as_var(a)
    out = _sigmoid(a.data)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Var:
    """log(1 + e^a), evaluated without overflow."""
    a = as_var(a)
    return make_op(_softplus(a.data), (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def relu(a) -> Var:
    a = as_var(a)
    on = a.data > 0
    return make_op(np.where(on, a.data, 0.0).astype(a.dtype, copy=False), (a,),
                   lambda g: (np.where(on, g, 0.0),), "relu")


def clip(a, lo: float, hi: float) -> Var:
    """Clamp with zero subgradient outside (lo, hi)."""
    a = as_var(a)
    inside = (a.data > lo) & (a.data < hi)
    return make_op(np.clip(a.data, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),), "clip")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of -|x| never overflows; pick the matching branch per sign
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


# --------------------------------------------------------------------------
# reductions and shape ops


def vsum(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_op(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return vsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Var:
    a = as_var(a)
    inv = None if axes is None else np.argsort(axes)
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, i: int, j: int) -> Var:
    a = as_var(a)
    return make_op(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def broadcast_to(a, shape) -> Var:
    a = as_var(a)
    old = a.shape
    return make_op(np.broadcast_to(a.data, shape), (a,), lambda g: (unbroadcast(g, old),), "broadcast")


def getitem(a, idx) -> Var:
    a = as_var(a)
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=np.result_type(dtype, g.dtype))
        if _is_fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return make_op(a.data[idx], (a,), bw, "getitem")


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(vs: Sequence, axis: int = -1) -> Var:
    vs = [as_var(v) for v in vs]
    sizes = [v.shape[axis] for v in vs]
    splits = np.cumsum(sizes)[:-1]
    return make_op(np.concatenate([v.data for v in vs], axis=axis), vs,
                   lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(vs: Sequence, axis: int = 0) -> Var:
    vs = [as_var(v) for v in vs]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(vs)))

    return make_op(np.stack([v.data for v in vs], axis=axis), vs, bw, "stack")


def matmul(a, b) -> Var:
    """`a @ b` for `a` of shape (..., C) and a 2-D `b` of shape (C, D)."""
    a, b = as_var(a), as_var(b)
    ad, bd = a.data, b.data
    if bd.ndim != 2:
        raise ValueError("matmul expects a 2-D right operand")

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return make_op(ad @ bd, (a, b), bw, "matmul")


def exclusive_cumprod(a, axis: int = -1) -> Var:
    """out[..., i] = prod_{j<i} a[..., j]; out[..., 0] = 1.

    The backward is a reverse scan that never divides by `a`, so entries equal
    to zero (fully opaque samples) are handled exactly.
    """
    a = as_var(a)
    ad = np.moveaxis(a.data, axis, -1)
    n = ad.shape[-1]
    out = np.ones_like(ad)
    if n > 1:
        out[..., 1:] = np.cumprod(ad[..., :-1], axis=-1)

    def bw(g):
        g = np.moveaxis(g, axis, -1)
        # S_j = sum_{i>j} g_i prod_{j<k<i} a_k, then grad a_j = out_j * S_j
        s = np.zeros_like(g)
        for j in range(n - 2, -1, -1):
            s[..., j] = g[..., j + 1] + ad[..., j + 1] * s[..., j + 1]
        return (np.moveaxis(out * s, -1, axis),)

    return make_op(np.moveaxis(out, -1, axis), (a,), bw, "exclusive_cumprod")


# --------------------------------------------------------------------------
# sparse row gradients (feature grids touch a few thousand of ~10^6 rows)


class SparseGrad:
    """Row-sparse cotangent for an array viewed as (rows, channels)."""

    __slots__ = ("index", "rows", "shape")
    __array_ufunc__ = None

    def __init__(self, index: np.ndarray, rows: np.ndarray, shape: tuple):
        self.index = np.asarray(index, dtype=np.int64).reshape(-1)
        self.rows = rows.reshape(self.index.size, shape[-1])
        self.shape = tuple(shape)

    def __add__(self, other):
        if isinstance(other, SparseGrad):
            return SparseGrad(np.concatenate([self.index, other.index]),
                              np.concatenate([self.rows, other.rows]), self.shape)
        return self.to_dense() + other

    __radd__ = __add__

    def coalesce(self) -> "SparseGrad":
        from .._kernels import scatter_rows

        uniq, inverse = np.unique(self.index, return_inverse=True)
        out = np.zeros((uniq.size, self.shape[-1]), dtype=self.rows.dtype)
        scatter_rows(inverse.reshape(-1), np.ascontiguousarray(self.rows), out)
        return SparseGrad(uniq, out, self.shape)

    def to_dense(self) -> np.ndarray:
        c = self.coalesce()
        dense = np.zeros((int(np.prod(self.shape[:-1])), self.shape[-1]), dtype=self.rows.dtype)
        dense[c.index] = c.rows
        return dense.reshape(self.shape)

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.rows)))


def _finite(g) -> bool:
    return g.all_finite() if isinstance(g, SparseGrad) else bool(np.all(np.isfinite(g)))


# --------------------------------------------------------------------------
# sweep


def _collect(out: Var) -> list[Var]:
    seen: set[int] = set()
    nodes: list[Var] = []
    stack_ = [out]
    while stack_:
        v = stack_.pop()
        if v.id in seen:
            continue
        seen.add(v.id)
        nodes.append(v)
        stack_.extend(p for p in v.parents if p.requires_grad)
    nodes.sort(key=lambda v: v.id, reverse=True)
    return nodes


def _sweep(nodes: list[Var], out: Var, check_each: bool) -> dict[int, np.ndarray]:
    pending: dict = {out.id: np.ones_like(out.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    for v in nodes:
        g = pending.pop(v.id, None)
        if g is None:
            continue
        if v.backward_fn is None:
            leaf_grads[v.id] = g
            continue
        pgs = v.backward_fn(g)
        for p, pg in zip(v.parents, pgs):
            if pg is None or not p.requires_grad:
                continue
            if check_each and not _finite(pg):
                raise FloatingPointError(f"non-finite gradient produced by op '{v.op}' (node {v.id})")
            # cotangents carry the precision of the value they belong to
            if isinstance(pg, np.ndarray) and pg.dtype != p.data.dtype and p.data.dtype.kind == "f":
                pg = pg.astype(p.data.dtype)
            prev = pending.get(p.id)
            pending[p.id] = pg if prev is None else prev + pg
    return leaf_grads


def gradients(out: Var, leaves: Iterable[Var], check_finite: bool = True,
              dense: bool = True) -> list:
    """d out / d leaf for every leaf; unreachable leaves receive zeros.

    With `dense=False`, leaves fed by row-sparse ops keep a `SparseGrad`.

    `out` must be a scalar. Fan-in cotangents are summed in the fixed order the
    consumers are visited (descending node id), so repeated calls on the same
    tape are bit-identical. On a non-finite leaf gradient the sweep is replayed
    with per-node checks to name the offending op.
    """
    if out.data.size != 1:
        raise ValueError(f"gradients() needs a scalar output, got shape {out.shape}")
    leaves = list(leaves)
    if not out.requires_grad:
        return [np.zeros_like(l.data) for l in leaves]
    nodes = _collect(out)
    got = _sweep(nodes, out, check_each=False)
    result = []
    for leaf in leaves:
        g = got.get(leaf.id)
        if g is None:
            g = np.zeros_like(leaf.data)
        elif isinstance(g, SparseGrad):
            g = g.to_dense() if dense else g
        else:
            g = np.asarray(g).reshape(leaf.shape)
        result.append(g)
    if check_finite and not all(_finite(g) for g in result):
        _sweep(nodes, out, check_each=True)
        raise FloatingPointError("non-finite gradient reached a leaf")
    return result


def backward(out: Var, check_finite: bool = True) -> None:
    """Accumulate gradients into `.grad` of every reachable leaf that requires grad."""
    nodes = _collect(out)
    leaves = [v for v in nodes if v.backward_fn is None and v.requires_grad]
    for leaf, g in zip(leaves, gradients(out, leaves, check_finite)):
        leaf.grad = g if leaf.grad is None else leaf.grad + g
