"""Observed-to-canonical warp: SE(3) field about an anchor plus a topology network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffmath import Dual, Var, jacobian_fwd, no_grad, tape
from .diffmath.dual import concat
from .layers import MLP

# R = I + 2 * M(q q^T); rows list (coef, a, b) over quaternion indices w=0, x=1, y=2, z=3
_ROT_TERMS = {
    (0, 0): [(-1, 2, 2), (-1, 3, 3)],
    (0, 1): [(1, 1, 2), (-1, 0, 3)],
    (0, 2): [(1, 1, 3), (1, 0, 2)],
    (1, 0): [(1, 1, 2), (1, 0, 3)],
    (1, 1): [(-1, 1, 1), (-1, 3, 3)],
    (1, 2): [(1, 2, 3), (-1, 0, 1)],
    (2, 0): [(1, 1, 3), (-1, 0, 2)],
    (2, 1): [(1, 2, 3), (1, 0, 1)],
    (2, 2): [(-1, 1, 1), (-1, 2, 2)],
}
_ROT_MAP = np.zeros((16, 9))
for (i, j), terms in _ROT_TERMS.items():
    for c, a, b in terms:
        _ROT_MAP[4 * a + b, 3 * i + j] += 2.0 * c


def _as_dual(x) -> tuple[Dual, bool]:
    if isinstance(x, Dual):
        return x, False
    return Dual.const(np.asarray(x, dtype=np.float64)), True


def quat_exp(r):
    """exp of the pure quaternion (0, r): (cos|r|, sin|r| r/|r|), series branch near r = 0.

    Accepts an array (..., 3) or a Dual; returns (..., 4) as (w, x, y, z).
    """
    rd, plain = _as_dual(r)
    s = (rd * rd).sum(-1, keepdims=True)
    q = concat([s.cos_sqrt(), rd * s.sinc_sqrt()], axis=-1)
    return q.var.data[0] if plain else q


def quat_to_matrix(q):
    """Rotation matrix (..., 3, 3) of a unit quaternion (..., 4)."""
    qd, plain = _as_dual(q)
    outer = qd.reshape(qd.shape[:-1] + (4, 1)) * qd.reshape(qd.shape[:-1] + (1, 4))
    flat = outer.reshape(qd.shape[:-1] + (16,)) @ _ROT_MAP.astype(qd.var.dtype)
    eye = np.eye(3, dtype=qd.var.dtype).reshape(9)
    rot = (flat + eye).reshape(qd.shape[:-1] + (3, 3))
    return rot.var.data[0] if plain else rot


@dataclass
class SE3Params:
    r: object
    a: object
    d: object


def se3_apply(p: SE3Params, x):
    """x' = q (x - a) q^-1 + a + d with q = quat_exp(r), via the rotation matrix of q."""
    plain = not any(isinstance(v, Dual) for v in (p.r, p.a, p.d, x))
    k = max([v.k for v in (p.r, p.a, p.d, x) if isinstance(v, Dual)], default=1)

    def lift(v):
        return v.with_k(k) if isinstance(v, Dual) else Dual.const(np.asarray(v, dtype=np.float64), k)

    r, a, d, xx = lift(p.r), lift(p.a), lift(p.d), lift(x)
    rot = quat_to_matrix(quat_exp(r))
    v = xx - a
    rotated = (rot * v.reshape(v.shape[:-1] + (1, 3))).sum(-1)
    # written as a correction to x so that r = d = 0 returns x bit-exactly for any anchor
    out = xx + (rotated - v) + d
    return out.var.data[0] if plain else out


@dataclass
class PosEncConfig:
    bands: int = 6
    window_alpha: float = 0.0

    @property
    def out_dim(self) -> int:
        return 3 + 6 * self.bands

    def weights(self) -> np.ndarray:
        k = np.arange(self.bands)
        return 0.5 * (1.0 - np.cos(np.pi * np.clip(self.window_alpha - k, 0.0, 1.0)))


def posenc(x, cfg: PosEncConfig):
    """[x, w_k sin(2^k pi x), w_k cos(2^k pi x) for k < L] with cosine-eased band weights."""
    xd, plain = _as_dual(x)
    if cfg.bands == 0:
        return x
    dt = xd.var.dtype
    freqs = (2.0 ** np.arange(cfg.bands) * np.pi).astype(dt)[:, None]
    w = cfg.weights().astype(dt)[:, None]
    lead = xd.shape[:-1]
    scaled = xd.reshape(lead + (1, 3)) * freqs
    bands = concat([scaled.sin() * w, scaled.cos() * w], axis=-1)
    enc = concat([xd, bands.reshape(lead + (6 * cfg.bands,))], axis=-1)
    return enc.var.data[0] if plain else enc


@dataclass
class FrameCodes:
    """Per-frame deformation code z and appearance code (rows of the code tables)."""

    z: Var
    app: Var


class DeformationField:
    """SE(3) deformation network and (optional) topology network, both fed [posenc(x), z]."""

    def __init__(self, rng: np.random.Generator, ambient_dim: int = 2, z_dim: int = 64, bands: int = 6,
                 width: int = 128, depth: int = 6, skip: int | None = 4, mode: str = "se3",
                 dtype=np.float64):
        if mode != "se3":
            raise NotImplementedError(f"deformation mode '{mode}' is an extension point only")
        self.pe = PosEncConfig(bands)
        self.ambient_dim = ambient_dim
        skip = skip if skip is not None and skip < depth else None
        self.deform_net = MLP(self.pe.out_dim, width, depth, 9, rng, cond_dim=z_dim, skip=skip,
                              zero_last=True, dtype=dtype, name="deform")
        self.topo_net = None
        if ambient_dim > 0:
            self.topo_net = MLP(self.pe.out_dim, width, depth, ambient_dim, rng, cond_dim=z_dim, skip=skip,
                                zero_last=True, dtype=dtype, name="topo")

    def params(self) -> list[Var]:
        ps = self.deform_net.params()
        if self.topo_net is not None:
            ps += self.topo_net.params()
        return ps

    def se3_params(self, x: Dual, z: Var) -> SE3Params:
        out = self.deform_net(posenc(x, self.pe), z)
        return SE3Params(out[..., 0:3], out[..., 3:6], out[..., 6:9])

    def topology(self, x: Dual, z: Var) -> Dual | None:
        if self.topo_net is None:
            return None
        return self.topo_net(posenc(x, self.pe), z)

    def __call__(self, x: Dual, z: Var) -> tuple[Dual, Dual | None]:
        enc = posenc(x, self.pe)
        out = self.deform_net(enc, z)
        p = SE3Params(out[..., 0:3], out[..., 3:6], out[..., 6:9])
        x_canon = se3_apply(p, x)
        w = self.topo_net(enc, z) if self.topo_net is not None else None
        return x_canon, w


def map_to_canonical(field: DeformationField, x, codes: FrameCodes):
    """HyperPoint [x_canon, w] for observed points `x` (array (M, 3) or Dual)."""
    xd, plain = _as_dual(x)
    x_canon, w = field(xd, codes.z)
    if plain:
        w_val = w.var.data[0] if w is not None else np.zeros(x_canon.shape[:-1] + (0,))
        return x_canon.var.data[0], w_val
    return x_canon, w


def deform_jacobian(field: DeformationField, x, codes: FrameCodes) -> np.ndarray:
    """d x_canon / d x at observed points; (3, 3) for a single point, else (M, 3, 3)."""
    with no_grad():
        return jacobian_fwd(lambda xd: field(xd, codes.z)[0], x)
