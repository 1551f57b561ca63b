"""Rays, sampling along rays, SDF-to-opacity conversion and compositing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .deform import FrameCodes
from .diffmath import Dual, Var, no_grad, tape
from .diffmath.tape import _sigmoid, _softplus


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        rot = self.pose[:3, :3]
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-6:
            raise ValueError("camera pose rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3].copy()

    def project(self, points) -> np.ndarray:
        """World points (..., 3) to pixel coordinates (..., 2)."""
        p = np.asarray(points, dtype=np.float64)
        cam = (p - self.pose[:3, 3]) @ self.pose[:3, :3]
        return np.stack([self.fx * cam[..., 0] / cam[..., 2] + self.cx,
                         self.fy * cam[..., 1] / cam[..., 2] + self.cy], axis=-1)

    def pixel_dirs(self, u, v) -> np.ndarray:
        """Unit world-space directions through pixel coordinates (u, v)."""
        u, v = np.broadcast_arrays(np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64))
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        d = d @ self.pose[:3, :3].T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width,
                "height": self.height, "pose": self.pose.reshape(-1).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   np.asarray(d.get("pose", np.eye(4).reshape(-1)), dtype=np.float64).reshape(4, 4))


@dataclass
class Ray:
    origin: np.ndarray
    dir: np.ndarray
    pixel: tuple
    t: int
    near: float = 0.0
    far: float = np.inf

    def point_at(self, d) -> np.ndarray:
        return self.origin + np.multiply.outer(d, self.dir)


def gen_ray(cam: Camera, u: float, v: float, t: int = 0) -> Ray:
    """Back-project pixel coordinates (u, v); integer coordinates are pixel centres."""
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        raise ValueError(f"pixel ({u}, {v}) outside the {cam.width}x{cam.height} image")
    return Ray(cam.center, cam.pixel_dirs(u, v), (u, v), t)


@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    near: np.ndarray
    far: np.ndarray
    pixels: np.ndarray
    t: int

    def __len__(self):
        return len(self.origins)

    def subset(self, keep) -> "RayBatch":
        return RayBatch(self.origins[keep], self.dirs[keep], self.near[keep], self.far[keep],
                        self.pixels[keep], self.t)


def ray_box(origins, dirs, lo, hi, pad: float = 0.05):
    """Slab intersection with the box grown by `pad` of its size; returns (near, far, hit)."""
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    grow = 0.5 * pad * (hi - lo)
    lo, hi = lo - grow, hi + grow
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.nan_to_num(np.minimum(t0, t1), nan=-np.inf).max(axis=-1)
    tmax = np.nan_to_num(np.maximum(t0, t1), nan=np.inf).min(axis=-1)
    near = np.maximum(tmin, 1e-4)
    hit = tmax > near
    return near, tmax, hit


def make_rays(cam: Camera, pixels, t: int, box_lo, box_hi, pad: float = 0.05) -> RayBatch:
    """Rays through integer pixels (M, 2) as (u, v); rays missing the box are dropped."""
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    if len(pixels) and (pixels.min() < 0 or np.any(pixels[:, 0] >= cam.width) or np.any(pixels[:, 1] >= cam.height)):
        raise ValueError("pixel outside the image")
    dirs = cam.pixel_dirs(pixels[:, 0], pixels[:, 1])
    origins = np.broadcast_to(cam.center, dirs.shape).copy()
    near, far, hit = ray_box(origins, dirs, box_lo, box_hi, pad)
    return RayBatch(origins[hit], dirs[hit], near[hit], far[hit], pixels[hit], t)


# --------------------------------------------------------------------------
# sampling


def stratified_sample(near, far, count: int = 64, rng: np.random.Generator | None = None, u=None) -> np.ndarray:
    """One uniform draw in each of `count` equal sub-intervals of [near, far] per ray.

    `u` overrides the random offsets (shape broadcastable to (R, count)).
    """
    if count < 2:
        raise ValueError("need at least two samples per ray")
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    if u is None:
        u = (rng or np.random.default_rng()).random((len(near), count))
    u = np.broadcast_to(u, (len(near), count))
    frac = (np.arange(count) + u) / count
    return near[:, None] + frac * (far - near)[:, None]


def sample_pdf(edges, weights, u, floor: float = 0.01) -> np.ndarray:
    """Inverse-CDF draws from piecewise-constant densities over bins `edges` (R, B+1).

    Bin masses are the normalised `weights` mixed with a length-proportional
    floor of total mass `floor`. Rows whose weights sum to zero sample uniformly.
    """
    edges = np.asarray(edges, dtype=np.float64)
    w = np.maximum(np.asarray(weights, dtype=np.float64), 0.0)
    u = np.asarray(u, dtype=np.float64)
    r, b = w.shape
    lengths = np.diff(edges, axis=-1)
    uni = lengths / lengths.sum(-1, keepdims=True)
    tot = w.sum(-1, keepdims=True)
    empty = tot[:, 0] <= 0
    mass = np.where(empty[:, None], uni, (1.0 - floor) * w / np.where(empty[:, None], 1.0, tot) + floor * uni)
    cdf = np.concatenate([np.zeros((r, 1)), np.cumsum(mass, axis=-1)], axis=-1)
    cdf[:, -1] = 1.0
    # batched searchsorted: offset each row into its own unit interval
    offs = 2.0 * np.arange(r)[:, None]
    idx = np.searchsorted((cdf + offs).ravel(), (u + offs).ravel(), side="right").reshape(u.shape)
    idx = idx - (np.arange(r) * (b + 1))[:, None] - 1
    idx = np.clip(idx, 0, b - 1)
    c0 = np.take_along_axis(cdf, idx, -1)
    c1 = np.take_along_axis(cdf, idx + 1, -1)
    e0 = np.take_along_axis(edges, idx, -1)
    e1 = np.take_along_axis(edges, idx + 1, -1)
    frac = np.where(c1 > c0, (u - c0) / np.where(c1 > c0, c1 - c0, 1.0), 0.5)
    return e0 + np.clip(frac, 0.0, 1.0) * (e1 - e0)


def _next_phi(phi, mode: str):
    """phi shifted by one sample, with a virtual value after the last one."""
    if mode == "virtual":
        tail = phi[:, -1:]
    elif mode == "extrapolate":
        tail = 2.0 * phi[:, -1:] - phi[:, -2:-1]
    else:
        raise ValueError(f"unknown last-alpha mode '{mode}'")
    if isinstance(phi, Var):
        return tape.concat([phi[:, 1:], tail], axis=-1)
    return np.concatenate([phi[:, 1:], tail], axis=-1)


def alpha_from_sdf(phi, phi_next, lam):
    """Opacity between consecutive samples: max((s(phi) - s(phi_next)) / s(phi), 0), s = sigmoid(lam x).

    Computed as 1 - exp(log s(phi_next) - log s(phi)) so that very negative
    arguments do not underflow; the log-ratio is capped at 0 (where alpha is
    clamped anyway) so exiting intervals cannot overflow. Returns a tape node
    if any input is one.
    """
    if not any(isinstance(v, Var) for v in (phi, phi_next, lam)):
        phi, phi_next, lam = (np.asarray(v, dtype=np.float64) for v in (phi, phi_next, lam))
        if np.any(lam <= 0):
            raise ValueError("lambda must be positive")
        ratio = np.exp(np.minimum(_softplus(-lam * phi) - _softplus(-lam * phi_next), 0.0))
        return np.clip(1.0 - ratio, 0.0, 1.0)
    lam_v = tape.as_var(lam)
    if np.any(lam_v.data <= 0):
        raise ValueError("lambda must be positive")
    log_ratio = tape.softplus(-(lam_v * phi)) - tape.softplus(-(lam_v * phi_next))
    log_ratio = tape.where(log_ratio.data < 0, log_ratio, 0.0)
    return tape.relu(1.0 - tape.exp(log_ratio))


def weights_from_alpha(alpha):
    """(T, w) with T_i = prod_{j<i} (1 - alpha_j) and w_i = T_i alpha_i along the last axis."""
    if isinstance(alpha, Var):
        trans = tape.exclusive_cumprod(1.0 - alpha, axis=-1)
        return trans, trans * alpha
    alpha = np.asarray(alpha, dtype=np.float64)
    trans = np.ones_like(alpha)
    trans[..., 1:] = np.cumprod(1.0 - alpha[..., :-1], axis=-1)
    return trans, trans * alpha


def composite(weights, colors, depths):
    """(c_hat, d_hat, m_hat) = (sum w c, sum w d, sum w) over the sample axis."""
    if isinstance(weights, Var) or isinstance(colors, Var):
        w = tape.as_var(weights)
        c = tape.vsum(tape.reshape(w, w.shape + (1,)) * colors, axis=-2)
        return c, tape.vsum(w * depths, axis=-1), tape.vsum(w, axis=-1)
    w = np.asarray(weights, dtype=np.float64)
    return (w[..., None] * colors).sum(-2), (w * depths).sum(-1), w.sum(-1)


def importance_sample(depths, phi_fn, lam: float, rng: np.random.Generator, per_round: int = 16,
                      rounds: int = 4, floor: float = 0.01):
    """Grow the sample set by `rounds` inverse-CDF draws of `per_round` depths each.

    `phi_fn(depths (R, n)) -> phi (R, n)` evaluates the SDF without tape. Weights
    for each round come from the opacities of the current sample intervals.
    Returns the merged ascending depths and their phi values.
    """
    d = np.asarray(depths, dtype=np.float64)
    phi = phi_fn(d)
    for _ in range(rounds):
        alpha = alpha_from_sdf(phi[:, :-1], phi[:, 1:], lam)
        _, w = weights_from_alpha(alpha)
        new = sample_pdf(d, w, rng.random((len(d), per_round)), floor)
        d = np.concatenate([d, new], axis=-1)
        phi = np.concatenate([phi, phi_fn(new)], axis=-1)
        order = np.argsort(d, axis=-1, kind="stable")
        d = np.take_along_axis(d, order, -1)
        phi = np.take_along_axis(phi, order, -1)
    return d, phi


# --------------------------------------------------------------------------
# full pipeline


@dataclass
class RenderConfig:
    n_uniform: int = 64
    per_round: int = 16
    rounds: int = 4
    floor: float = 0.01
    last_alpha: str = "virtual"
    box_pad: float = 0.05
    canonical_grad: bool = False

    @property
    def samples_per_ray(self) -> int:
        return self.n_uniform + self.rounds * self.per_round


@dataclass
class RaySampleSet:
    depths: np.ndarray
    points: np.ndarray
    phi: Var
    grad: Var
    oob: np.ndarray
    alpha: Var
    trans: Var
    weights: Var
    colors: Var
    x_canon: np.ndarray | None = None
    grad_canon: Var | None = None


@dataclass
class RayRender:
    color: Var
    depth: Var
    mask: Var


def composite_ray(samples: RaySampleSet):
    return composite(samples.weights, samples.colors, samples.depths)


def sample_depths(model, rays: RayBatch, codes: FrameCodes, rng: np.random.Generator,
                  cfg: RenderConfig) -> np.ndarray:
    """Stratified plus importance-sampled depths (R, n_uniform + rounds * per_round), no tape."""
    d0 = stratified_sample(rays.near, rays.far, cfg.n_uniform, rng)
    if cfg.rounds == 0:
        return d0
    lam = float(model.sharpness)

    def phi_fn(d):
        pts = rays.origins[:, None, :] + d[..., None] * rays.dirs[:, None, :]
        with no_grad():
            phi, *_ = model.sdf(Dual.const(pts.reshape(-1, 3).astype(model.dtype)), codes)
        return phi.var.data[0, :, 0].astype(np.float64).reshape(d.shape)

    d, _ = importance_sample(d0, phi_fn, lam, rng, cfg.per_round, cfg.rounds, cfg.floor)
    return d


def render_rays(model, rays: RayBatch, codes: FrameCodes, rng: np.random.Generator | None = None,
                cfg: RenderConfig | None = None, depths: np.ndarray | None = None):
    """Render a batch of rays; returns (RayRender, RaySampleSet) with tape nodes for the losses.

    `depths` (R, S) bypasses the sampler (used by gradient checks).
    """
    cfg = cfg or RenderConfig()
    if depths is None:
        depths = sample_depths(model, rays, codes, rng, cfg)
    r, s = depths.shape
    dt = model.dtype
    pts = rays.origins[:, None, :] + depths[..., None] * rays.dirs[:, None, :]
    flat = pts.reshape(-1, 3).astype(dt)
    phi_d, x_canon, w, oob = model.sdf(Dual.seed(flat), codes)
    phi = tape.reshape(phi_d.var[0, :, 0], (r, s))
    grad = tape.transpose(phi_d.var[1:, :, 0])
    # canonical view direction: J dir, with J read off the tangents of x_canon
    dirs = np.repeat(rays.dirs, s, axis=0).astype(dt)
    jd = tape.vsum(x_canon.var[1:] * dirs.T[:, :, None], axis=0)
    d_c = jd / tape.sqrt(tape.vsum(tape.square(jd), axis=-1, keepdims=True) + 1e-12)
    colors = model.color(x_canon, d_c, grad, codes, w)
    grad_canon = None
    if cfg.canonical_grad:
        wv = Dual(tape.reshape(w.value, (1,) + w.shape)) if w is not None else None
        phi_c, _ = model.sdf_canonical(Dual.seed_var(x_canon.value), wv)
        grad_canon = tape.reshape(tape.transpose(phi_c.var[1:, :, 0]), (r, s, 3))
    alpha = alpha_from_sdf(phi, _next_phi(phi, cfg.last_alpha), model.lam)
    trans, weights = weights_from_alpha(alpha)
    colors = tape.reshape(colors, (r, s, 3))
    c_hat, d_hat, m_hat = composite(weights, colors, depths.astype(dt))
    samples = RaySampleSet(depths, pts, phi, tape.reshape(grad, (r, s, 3)), oob.reshape(r, s), alpha, trans,
                           weights, colors, x_canon.var.data[0].reshape(r, s, 3), grad_canon)
    return RayRender(c_hat, d_hat, m_hat), samples


def render_image(model, cam: Camera, t: int, rng: np.random.Generator, cfg: RenderConfig | None = None,
                 chunk: int = 256):
    """Render RGB (H, W, 3), z-depth (H, W) and mask value (H, W) of frame t without tape."""
    cfg = cfg or RenderConfig()
    h, w = cam.height, cam.width
    vv, uu = np.mgrid[0:h, 0:w]
    pix = np.stack([uu.ravel(), vv.ravel()], axis=-1)
    rgb = np.zeros((h * w, 3))
    depth = np.zeros(h * w)
    mask = np.zeros(h * w)
    codes = model.codes(t)
    lo = np.asarray(model.cfg.box_origin)
    hi = lo + np.asarray(model.cfg.box_extent)
    for s in range(0, len(pix), chunk):
        rays = make_rays(cam, pix[s:s + chunk], t, lo, hi, cfg.box_pad)
        if len(rays) == 0:
            continue
        with no_grad():
            out, _ = render_rays(model, rays, codes, rng, cfg)
        idx = rays.pixels[:, 1] * w + rays.pixels[:, 0]
        rgb[idx] = out.color.data
        depth[idx] = out.depth.data * (rays.dirs @ cam.pose[:3, 2])
        mask[idx] = out.mask.data
    return rgb.reshape(h, w, 3), depth.reshape(h, w), mask.reshape(h, w)
