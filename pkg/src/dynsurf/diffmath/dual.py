"""Forward-mode tangents carried on top of the reverse tape.

A `Dual` wraps one `Var` whose leading axis stacks ``[value, d/dx, d/dy, d/dz]``
(K = 4) or just ``[value]`` (K = 1, no tangents). Nonlinear ops are fused tape
nodes that also propagate the tangent slices, so reverse-mode over a Dual
yields the forward-over-reverse gradients that Eikonal and normal terms need.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tape
from .tape import Var, as_var, make_op, unbroadcast


def _sig(x):
    return tape._sigmoid(x)


# name -> (f, f', f'') on numpy arrays; f'' of None means identically zero
def _unary_table(name: str, beta: float = 1.0):
    if name == "exp":
        return np.exp, np.exp, np.exp
    if name == "sin":
        return np.sin, np.cos, lambda x: -np.sin(x)
    if name == "cos":
        return np.cos, lambda x: -np.sin(x), lambda x: -np.cos(x)
    if name == "sigmoid":
        def d1(x):
            s = _sig(x)
            return s * (1 - s)

        def d2(x):
            s = _sig(x)
            return s * (1 - s) * (1 - 2 * s)
        return _sig, d1, d2
    if name == "softplus":
        def f(x):
            return tape._softplus(beta * x) / beta

        def d2(x):
            s = _sig(beta * x)
            return beta * s * (1 - s)
        return f, lambda x: _sig(beta * x), d2
    if name == "relu":
        return (lambda x: np.maximum(x, 0), lambda x: (x > 0).astype(x.dtype), None)
    if name == "sqrt":
        return np.sqrt, lambda x: 0.5 / np.sqrt(x), lambda x: -0.25 / (x * np.sqrt(x))
    if name == "square":
        return np.square, lambda x: 2 * x, lambda x: np.full_like(x, 2)
    if name == "reciprocal":
        return (lambda x: 1 / x, lambda x: -1 / (x * x), lambda x: 2 / (x * x * x))
    if name == "log":
        return np.log, lambda x: 1 / x, lambda x: -1 / (x * x)
    if name == "tanh":
        def d1(x):
            return 1 - np.tanh(x) ** 2

        def d2(x):
            t = np.tanh(x)
            return -2 * t * (1 - t * t)
        return np.tanh, d1, d2
    if name == "cos_sqrt":
        return cos_sqrt, lambda s: -0.5 * sinc_sqrt(s), lambda s: -0.5 * sinc_sqrt_d1(s)
    if name == "sinc_sqrt":
        return sinc_sqrt, sinc_sqrt_d1, sinc_sqrt_d2
    raise ValueError(f"unsupported dual op '{name}'")


# Functions of s = |r|^2 used by the quaternion exponential. Near s = 0 they
# switch to Taylor series so neither value nor derivatives divide by zero.
_SERIES_CUT = 1e-2


def _series(s, coeffs):
    out = np.zeros_like(s)
    for c in reversed(coeffs):
        out = out * s + c
    return out


def _fact(n):
    return float(np.prod(np.arange(1, n + 1))) if n > 0 else 1.0


_S0 = [(-1) ** n / _fact(2 * n + 1) for n in range(9)]
_S1 = [(-1) ** n * n / _fact(2 * n + 1) for n in range(1, 9)]
_S2 = [(-1) ** n * n * (n - 1) / _fact(2 * n + 1) for n in range(2, 9)]
_C0 = [(-1) ** n / _fact(2 * n) for n in range(9)]


def _split(s, small_fn, big_fn):
    s = np.asarray(s)
    small = s < _SERIES_CUT
    out = np.empty_like(s, dtype=np.result_type(s, np.float32))
    if np.any(small):
        out[small] = small_fn(s[small])
    if not np.all(small):
        out[~small] = big_fn(s[~small])
    return out


def cos_sqrt(s):
    return _split(s, lambda v: _series(v, _C0), lambda v: np.cos(np.sqrt(v)))


def sinc_sqrt(s):
    return _split(s, lambda v: _series(v, _S0), lambda v: np.sin(np.sqrt(v)) / np.sqrt(v))


def sinc_sqrt_d1(s):
    def big(v):
        u = np.sqrt(v)
        return (u * np.cos(u) - np.sin(u)) / (2 * u ** 3)
    return _split(s, lambda v: _series(v, _S1), big)


def sinc_sqrt_d2(s):
    def big(v):
        u = np.sqrt(v)
        return (-u * u * np.sin(u) - 3 * (u * np.cos(u) - np.sin(u))) / (4 * u ** 5)
    return _split(s, lambda v: _series(v, _S2), big)


# --------------------------------------------------------------------------
# fused dual kernels


def dual_unary(x: Var, name: str, beta: float = 1.0) -> Var:
    f, df, d2f = _unary_table(name, beta)
    xd = x.data
    x0 = xd[0]
    d1 = df(x0)
    out = np.empty_like(xd, dtype=np.result_type(xd, np.float32))
    out[0] = f(x0)
    if xd.shape[0] > 1:
        out[1:] = d1 * xd[1:]

    def bw(g):
        gx = np.empty_like(g)
        gx[0] = g[0] * d1
        if xd.shape[0] > 1:
            gx[1:] = g[1:] * d1
            if d2f is not None:
                gx[0] += d2f(x0) * np.sum(g[1:] * xd[1:], axis=0)
        return (gx,)

    return make_op(out, (x,), bw, f"dual_{name}")


def dual_mul(a: Var, b: Var) -> Var:
    ad, bd = a.data, b.data
    out = ad[:1] * bd
    if out.shape[0] > 1:
        out[1:] += ad[1:] * bd[:1]

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.empty(np.broadcast_shapes(ad.shape, bd.shape), dtype=g.dtype)
            ga[0] = np.sum(g * bd, axis=0)
            ga[1:] = g[1:] * bd[:1]
            ga = unbroadcast(ga, ad.shape)
        if b.requires_grad:
            gb = np.empty(np.broadcast_shapes(ad.shape, bd.shape), dtype=g.dtype)
            gb[0] = np.sum(g * ad, axis=0)
            gb[1:] = g[1:] * ad[:1]
            gb = unbroadcast(gb, bd.shape)
        return ga, gb

    return make_op(out, (a, b), bw, "dual_mul")


def dual_dense(x: Var, w: Var, b: Var | None = None) -> Var:
    """Affine layer: every slice is multiplied by `w`, the bias lands on the value slice only."""
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out[0] += b.data

    def bw(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g[0].reshape(-1, g.shape[-1]).sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_op(out, parents, bw, "dual_dense")


def _add_value(x: Var, c: Var) -> Var:
    out = x.data.copy() if x.data.dtype == np.result_type(x.data, c.data) else x.data.astype(
        np.result_type(x.data, c.data))
    out[0] = out[0] + c.data
    cs = c.shape
    return make_op(out, (x, c), lambda g: (g, unbroadcast(g[0], cs)), "dual_add_value")


def _lift(v: Var, k: int) -> Var:
    out = np.zeros((k,) + v.shape, dtype=v.dtype)
    out[0] = v.data
    return make_op(out, (v,), lambda g: (g[0],), "dual_lift")


# --------------------------------------------------------------------------


class Dual:
    """Value plus (optionally) three spatial tangents, all living on the tape."""

    __slots__ = ("var",)

    def __init__(self, var: Var):
        self.var = var

    def __array__(self, *args, **kwargs):
        raise TypeError("operation not supported on Dual values; use Dual methods")

    __array_ufunc__ = None

    # construction ------------------------------------------------------------
    @staticmethod
    def seed(x) -> "Dual":
        """Identity tangents: slice k+1 is d(x)/d(x_k)."""
        x = np.asarray(x)
        data = np.zeros((4,) + x.shape, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
        data[0] = x
        for k in range(3):
            data[k + 1, ..., k] = 1.0
        return Dual(Var(data))

    @staticmethod
    def seed_var(v: Var) -> "Dual":
        """Like `seed`, but the value slice is a tape node (tangents are constants)."""
        eye = np.zeros((3,) + v.shape, dtype=v.dtype)
        for k in range(3):
            eye[k, ..., k] = 1.0
        return Dual(tape.concat([tape.reshape(v, (1,) + v.shape), Var(eye)], axis=0))

    @staticmethod
    def const(x, k: int = 1) -> "Dual":
        x = np.asarray(x)
        data = np.zeros((k,) + x.shape, dtype=x.dtype)
        data[0] = x
        return Dual(Var(data))

    @staticmethod
    def lift(v, k: int) -> "Dual":
        v = as_var(v)
        return Dual(_lift(v, k))

    # views ---------------------------------------------------------------------
    @property
    def k(self) -> int:
        return self.var.shape[0]

    @property
    def shape(self):
        return self.var.shape[1:]

    @property
    def value(self) -> Var:
        return self.var[0]

    @property
    def tangents(self) -> Var:
        return self.var[1:]

    def with_k(self, k: int) -> "Dual":
        if k == self.k:
            return self
        if self.k != 1:
            raise ValueError("can only widen value-only duals")
        return Dual.lift(self.value, k)

    def _coerce(self, other) -> "Dual | Var":
        if isinstance(other, Dual):
            if other.k != self.k:
                if self.k == 1:
                    raise ValueError("K mismatch: widen the left operand first")
                other = other.with_k(self.k)
            return other
        return as_var(other)

    # arithmetic ----------------------------------------------------------------
    def __add__(self, other):
        other = self._coerce(other)
        if isinstance(other, Dual):
            return Dual(self.var + other.var)
        return Dual(_add_value(self.var, other))

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.var)

    def __sub__(self, other):
        return self + (-other if isinstance(other, (Dual, Var)) else -np.asarray(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        other = self._coerce(other)
        if isinstance(other, Dual):
            return Dual(dual_mul(self.var, other.var))
        return Dual(self.var * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            return self * other.reciprocal()
        return self * (1.0 / as_var(other))

    def __matmul__(self, m):
        return Dual(tape.matmul(self.var, m))

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        return Dual(self.var[(slice(None),) + idx])

    # nonlinear -----------------------------------------------------------------
    def _unary(self, name, beta=1.0):
        return Dual(dual_unary(self.var, name, beta))

    def exp(self):
        return self._unary("exp")

    def sin(self):
        return self._unary("sin")

    def cos(self):
        return self._unary("cos")

    def sigmoid(self):
        return self._unary("sigmoid")

    def softplus(self, beta: float = 1.0):
        return self._unary("softplus", beta)

    def relu(self):
        return self._unary("relu")

    def sqrt(self):
        return self._unary("sqrt")

    def square(self):
        return self._unary("square")

    def reciprocal(self):
        return self._unary("reciprocal")

    def log(self):
        return self._unary("log")

    def tanh(self):
        return self._unary("tanh")

    def cos_sqrt(self):
        return self._unary("cos_sqrt")

    def sinc_sqrt(self):
        return self._unary("sinc_sqrt")

    # structure -----------------------------------------------------------------
    def sum(self, axis=-1, keepdims=False):
        ax = axis + 1 if axis >= 0 else axis
        return Dual(tape.vsum(self.var, ax, keepdims))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Dual(tape.reshape(self.var, (self.k,) + tuple(shape)))

    def dense(self, w: Var, b: Var | None = None) -> "Dual":
        return Dual(dual_dense(self.var, w, b))


def concat(duals, axis: int = -1) -> Dual:
    k = max(d.k for d in duals)
    duals = [d.with_k(k) for d in duals]
    ax = axis + 1 if axis >= 0 else axis
    return Dual(tape.concat([d.var for d in duals], axis=ax))


def jacobian_fwd(fn: Callable[[Dual], Dual], x) -> np.ndarray:
    """Jacobian of a 3-vector -> 3-vector map by one 3-tangent forward pass.

    `x` is (3,) or (N, 3); the result is (3, 3) or (N, 3, 3) with entry
    [i, j] = d out_i / d x_j.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    with tape.no_grad():
        y = fn(Dual.seed(xs))
    if not isinstance(y, Dual) or y.k != 4 or y.shape != xs.shape:
        raise TypeError("map must return a 4-slice Dual of the input's shape")
    jac = np.moveaxis(y.var.data[1:], 0, -1)
    return jac[0] if single else jac
