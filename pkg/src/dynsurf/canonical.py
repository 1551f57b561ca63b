"""Canonical scene representation: dense feature grid plus shallow decoders."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .diffmath import AdamState, Dual, Var, adam_step, gradients, tape
from .diffmath.dual import concat
from .diffmath.tape import SparseGrad, make_op
from .layers import MLP

log = logging.getLogger(__name__)

GEO_CHANNELS = 26
COLOR_CHANNELS = 6


class ResolutionError(ValueError):
    pass


@dataclass
class FeatureGrid:
    """Dense lattice of C-channel features over an axis-aligned box.

    `resolution` counts cells per axis; the lattice stores resolution + 1 nodes
    per axis so that doubling nests the old nodes inside the new lattice.
    """

    values: Var
    origin: np.ndarray
    extent: np.ndarray
    max_resolution: int = 1024

    @property
    def resolution(self) -> int:
        return self.values.shape[0] - 1

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def cell_size(self) -> np.ndarray:
        return self.extent / self.resolution

    def node_positions(self) -> np.ndarray:
        axes = [self.origin[a] + np.arange(self.resolution + 1) * self.cell_size[a] for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def create_grid(resolution: int, channels: int = GEO_CHANNELS + COLOR_CHANNELS, origin=(-0.5, -0.5, -0.5),
                extent=(1.0, 1.0, 1.0), rng: np.random.Generator | None = None, std: float = 1e-2,
                dtype=np.float64, max_resolution: int = 1024) -> FeatureGrid:
    if resolution < 1 or resolution > max_resolution:
        raise ResolutionError(f"resolution {resolution} outside [1, {max_resolution}]")
    rng = rng or np.random.default_rng(0)
    n = resolution + 1
    values = (rng.normal(0.0, std, (n, n, n, channels))).astype(dtype)
    return FeatureGrid(Var(values, requires_grad=True, name="grid"), np.asarray(origin, dtype=np.float64),
                       np.asarray(extent, dtype=np.float64), max_resolution)


def trilerp(grid: FeatureGrid, x, channels: tuple[int, int] | None = None) -> tuple[Dual, np.ndarray]:
    """Trilinear interpolation of grid features at points `x` (Dual or array, (M, 3)).

    Returns the interpolated features as a Dual (tangents follow those of `x`)
    and a boolean out-of-bounds flag per point. Out-of-box points are clamped
    to the boundary and get zero spatial derivative along the clamped axes.
    """
    if not isinstance(x, Dual):
        x = Dual.const(np.asarray(x, dtype=grid.dtype))
    c0, c1 = channels if channels is not None else (0, grid.channels)
    vals = grid.values
    n = grid.resolution
    scale = (n / grid.extent).astype(grid.dtype)
    xd = x.var.data
    if xd.ndim != 3 or xd.shape[-1] != 3:
        raise ValueError(f"trilerp expects points of shape (M, 3), got {xd.shape[1:]}")
    k, m = xd.shape[0], xd.shape[1]
    u_raw = (xd[0] - grid.origin.astype(grid.dtype)) * scale
    inside = (u_raw >= 0) & (u_raw <= n)
    u = np.ascontiguousarray(np.clip(u_raw, 0, n), dtype=grid.dtype)
    du = np.ascontiguousarray(xd[1:] * scale * inside, dtype=grid.dtype)
    oob = ~inside.all(axis=-1)
    out = np.zeros((k, m, c1 - c0), dtype=grid.dtype)
    _kernels.trilerp_forward(vals.data, c0, c1, u, du, out)
    grid_shape = vals.shape

    def bw(g):
        g = np.ascontiguousarray(g, dtype=grid.dtype)
        node_idx = np.empty((m, 8), dtype=np.int64)
        node_grad = np.zeros((m, 8, grid_shape[-1]), dtype=grid.dtype)
        gu = np.zeros((m, 3), dtype=grid.dtype)
        gdu = np.zeros((k - 1, m, 3), dtype=grid.dtype)
        _kernels.trilerp_backward(vals.data, c0, c1, u, du, g, node_idx, node_grad, gu, gdu)
        gx = np.empty(xd.shape, dtype=grid.dtype)
        gx[0] = gu * scale * inside
        if k > 1:
            gx[1:] = gdu * scale * inside
        gv = SparseGrad(node_idx, node_grad, grid_shape) if vals.requires_grad else None
        return gv, gx

    return Dual(make_op(out, (vals, x.var), bw, "trilerp")), oob


def refine_nodes(values: np.ndarray) -> np.ndarray:
    """Resample node data from N to 2N cells; equals trilinear interpolation at the new nodes."""
    out = values
    for axis in range(3):
        out = np.moveaxis(out, axis, 0)
        fine = np.empty((2 * out.shape[0] - 1,) + out.shape[1:], dtype=out.dtype)
        fine[0::2] = out
        fine[1::2] = 0.5 * (out[:-1] + out[1:])
        out = np.moveaxis(fine, 0, axis)
    return np.ascontiguousarray(out)


def upsample_grid(grid: FeatureGrid) -> FeatureGrid:
    """Double the resolution; the represented trilinear field is unchanged."""
    new_res = 2 * grid.resolution
    if new_res > grid.max_resolution:
        raise ResolutionError(f"upsampling to {new_res} exceeds max resolution {grid.max_resolution}")
    values = Var(refine_nodes(grid.values.data), requires_grad=grid.values.requires_grad, name=grid.values.name)
    return FeatureGrid(values, grid.origin.copy(), grid.extent.copy(), grid.max_resolution)


# --------------------------------------------------------------------------
# decoders


class GeometryDecoder(MLP):
    def __init__(self, feat_dim: int, ambient_dim: int, rng, width: int = 64, depth: int = 2,
                 beta: float = 100.0, dtype=np.float64):
        super().__init__(feat_dim + ambient_dim, width, depth, 1, rng, activation="softplus",
                         beta=beta, dtype=dtype, name="geo")
        self.ambient_dim = ambient_dim


class ColorDecoder(MLP):
    def __init__(self, feat_dim: int, app_dim: int, rng, width: int = 64, depth: int = 2,
                 ambient_dim: int = 0, dtype=np.float64):
        super().__init__(feat_dim + 6 + ambient_dim, width, depth, 3, rng, activation="relu",
                         cond_dim=app_dim, dtype=dtype, name="color")
        self.ambient_dim = ambient_dim


class RenderSharpness:
    """Learnable lambda > 0 of the opacity sigmoid, stored as its logarithm."""

    def __init__(self, init: float, dtype=np.float64):
        if init <= 0:
            raise ValueError("sharpness must be positive")
        self.log_lam = Var(np.array(np.log(init), dtype=dtype), requires_grad=True, name="log_lambda")

    def value(self) -> Var:
        return tape.exp(self.log_lam)

    def __float__(self):
        return float(np.exp(self.log_lam.data))


def sdf_query(x_canon: Dual, w: Dual | None, grid: FeatureGrid, decoder: GeometryDecoder,
              channels: tuple[int, int] = (0, GEO_CHANNELS)) -> tuple[Dual, np.ndarray]:
    """phi = decoder([geometry features at x_canon, w]); positive outside. Returns ((K, M, 1), oob)."""
    feats, oob = trilerp(grid, x_canon, channels)
    if w is not None and decoder.ambient_dim:
        feats = concat([feats, w.with_k(feats.k)], axis=-1)
    return decoder(feats), oob


def color_query(x_canon, d_c: Var, normal: Var, app_code: Var, grid: FeatureGrid, decoder: ColorDecoder,
                channels: tuple[int, int] = (GEO_CHANNELS, GEO_CHANNELS + COLOR_CHANNELS),
                w: Var | None = None) -> Var:
    """RGB in [0, 1]^3 from colour features, canonical view direction, normal and appearance code.

    `x_canon` is the value of the canonical point (no tangents needed here);
    the result is an (M, 3) tape node.
    """
    if isinstance(x_canon, Dual):
        x_canon = Dual(tape.reshape(x_canon.value, (1,) + x_canon.shape))
    feats, _ = trilerp(grid, x_canon, channels)
    parts = [feats.value, d_c, normal]
    if decoder.ambient_dim and w is not None:
        parts.append(w)
    inp = Dual(tape.reshape(tape.concat(parts, axis=-1), (1, feats.shape[0], -1)))
    out = decoder(inp, app_code)
    return tape.sigmoid(out.value)


def sphere_sdf(x, center, radius) -> np.ndarray:
    return np.linalg.norm(np.asarray(x) - np.asarray(center), axis=-1) - radius


@dataclass
class SphereInitReport:
    mean_abs_residual: float
    steps: int
    converged: bool


def sphere_init(grid: FeatureGrid, decoder: GeometryDecoder, center, radius: float, steps: int = 600,
                rng: np.random.Generator | None = None, lr: float = 1e-2, batch: int = 4096,
                tol: float = 0.005, channels: tuple[int, int] = (0, GEO_CHANNELS)) -> SphereInitReport:
    """Regress the geometry field (with w = 0) onto the SDF of a sphere.

    Stops once the running mean |phi - sdf| drops below `tol * radius` or the
    step budget runs out; a missed target is reported with a warning.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    center = np.asarray(center, dtype=np.float64)
    lo, hi = grid.origin, grid.origin + grid.extent
    if np.any(center - radius < lo) or np.any(center + radius > hi):
        raise ValueError("sphere must lie inside the grid bounds")
    rng = rng or np.random.default_rng(0)
    params = [grid.values] + decoder.params()
    state = AdamState()
    resid = np.inf
    m = decoder.ambient_dim
    step = 0
    for step in range(1, steps + 1):
        x = rng.uniform(lo, hi, (batch, 3)).astype(grid.dtype)
        target = sphere_sdf(x, center, radius).astype(grid.dtype)
        w = Dual.const(np.zeros((batch, m), dtype=grid.dtype)) if m else None
        phi, _ = sdf_query(Dual.const(x), w, grid, decoder, channels)
        err = phi.value[:, 0] - target
        loss = tape.mean(tape.square(err))
        grads = gradients(loss, params, dense=False)
        adam_step([p.data for p in params], grads, state, lr)
        resid = float(np.mean(np.abs(err.data)))
        if resid < tol * radius:
            break
    converged = resid < tol * radius
    if not converged:
        warnings.warn(f"sphere_init: residual {resid:.4g} above target {tol * radius:.4g} after {step} steps")
    log.info("sphere_init: %d steps, mean |residual| %.4g", step, resid)
    return SphereInitReport(resid, step, converged)
