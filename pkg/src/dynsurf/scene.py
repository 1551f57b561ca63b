"""Analytic deforming scenes, a sphere-tracing reference renderer and RGB-D sequence I/O."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .render import Camera

SHAPES = ("sphere", "ellipsoid", "torus", "two_spheres")
TRAJECTORIES = ("static", "translation", "bend", "scale_pulse", "split")
ALBEDOS = ("solid", "checker", "gradient")
DEPTH_SCALE = 2000.0   # stored units per scene unit: 0.5 mm when a scene unit is 1 m


def _ellipsoid_sdf(p: np.ndarray, radii: np.ndarray, iters: int = 100) -> np.ndarray:
    """Exact signed distance to an axis-aligned ellipsoid by bisection on the Lagrange parameter."""
    e = np.asarray(radii, dtype=np.float64)
    # zero coordinates sit on the medial degeneracy of the root equation
    y = np.maximum(np.abs(p), 1e-9 * e.max())
    inside = ((y / e) ** 2).sum(-1) < 1.0
    emin2 = e.min() ** 2

    def g(t):
        return ((e * y / (t[..., None] + e * e)) ** 2).sum(-1) - 1.0

    # g decreases in t on (-emin^2, inf); bracket the root on each side of 0
    far = np.linalg.norm(y, axis=-1) * e.max() + 1.0
    lo = np.where(inside, -emin2 + 1e-15 * emin2, 0.0)
    hi = np.where(inside, 0.0, far)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        pos = g(mid) > 0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
    t = 0.5 * (lo + hi)
    x = e * e * y / (t[..., None] + e * e)
    dist = np.linalg.norm(x - y, axis=-1)
    return np.where(inside, -dist, dist)


@dataclass
class AnalyticScene:
    shape: str = "sphere"
    radius: float = 0.3
    radii: tuple = (0.3, 0.22, 0.18)          # ellipsoid semi-axes
    major: float = 0.25                        # torus radii (axis along y)
    minor: float = 0.08
    center: tuple = (0.0, 0.0, 0.0)
    trajectory: str = "translation"
    amplitude: float = 0.15
    period: float | None = None                # frames; None means the frame count
    gap: tuple = (0.6, 1.25)                   # split: centre offset range as multiples of the radius
    albedo: str = "checker"
    color: tuple = (0.8, 0.5, 0.3)
    color2: tuple = (0.3, 0.6, 0.9)
    checker_size: float = 0.1
    n_frames: int = 8

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape '{self.shape}'")
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory '{self.trajectory}'")
        if self.albedo not in ALBEDOS:
            raise ValueError(f"unknown albedo '{self.albedo}'")
        if self.trajectory == "split" and self.shape != "two_spheres":
            raise ValueError("the split trajectory needs the two_spheres shape")

    @property
    def lipschitz(self) -> float:
        """Upper bound on |grad phi|, used to scale sphere-tracing steps."""
        if self.trajectory == "bend":
            return 1.0 + abs(self.amplitude) * 1.0
        return 1.0

    def _phase(self, t) -> float:
        period = self.period or self.n_frames
        return 2.0 * np.pi * t / period

    def scale(self, t) -> float:
        return 1.0 + self.amplitude * np.sin(self._phase(t)) if self.trajectory == "scale_pulse" else 1.0

    def offset(self, t) -> np.ndarray:
        if self.trajectory == "translation":
            return np.array([self.amplitude * np.sin(self._phase(t)), 0.0, 0.0])
        return np.zeros(3)

    def half_gap(self, t) -> float:
        lo, hi = self.gap
        frac = t / max(self.n_frames - 1, 1)
        return self.radius * (lo + (hi - lo) * frac)

    def to_canonical(self, x, t) -> np.ndarray:
        """Inverse warp of observed points to the undeformed (canonical) shape frame."""
        p = np.asarray(x, dtype=np.float64) - np.asarray(self.center) - self.offset(t)
        if self.trajectory == "bend":
            # rotate about y by an angle that grows with height
            ang = -self.amplitude * np.sin(self._phase(t)) * p[..., 1]
            c, s = np.cos(ang), np.sin(ang)
            p = np.stack([c * p[..., 0] + s * p[..., 2], p[..., 1], -s * p[..., 0] + c * p[..., 2]], axis=-1)
        return p

    def _shape_sdf(self, p: np.ndarray, t) -> np.ndarray:
        k = self.scale(t)
        if self.shape == "sphere":
            return np.linalg.norm(p, axis=-1) - self.radius * k
        if self.shape == "ellipsoid":
            return _ellipsoid_sdf(p, np.asarray(self.radii) * k)
        if self.shape == "torus":
            q = np.stack([np.hypot(p[..., 0], p[..., 2]) - self.major * k, p[..., 1]], axis=-1)
            return np.linalg.norm(q, axis=-1) - self.minor * k
        h = self.half_gap(t) if self.trajectory == "split" else self.radius
        off = np.array([h, 0.0, 0.0])
        r = self.radius * k
        return np.minimum(np.linalg.norm(p - off, axis=-1), np.linalg.norm(p + off, axis=-1)) - r

    def sdf(self, x, t) -> np.ndarray:
        if not 0 <= t < self.n_frames:
            raise ValueError(f"frame {t} outside [0, {self.n_frames})")
        return self._shape_sdf(self.to_canonical(x, t), t)

    def normal(self, x, t, h: float = 1e-6) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        g = np.stack([self.sdf(x + h * e, t) - self.sdf(x - h * e, t) for e in np.eye(3)], axis=-1) / (2 * h)
        return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)

    def albedo_at(self, x, t) -> np.ndarray:
        p = self.to_canonical(x, t)
        c1 = np.asarray(self.color, dtype=np.float64)
        if self.albedo == "solid":
            return np.broadcast_to(c1, p.shape).copy()
        if self.albedo == "checker":
            parity = np.floor(p / self.checker_size).astype(np.int64).sum(-1) % 2
            return np.where(parity[..., None] == 0, c1, np.asarray(self.color2))
        return np.clip(0.5 + p / (4.0 * max(self.radius, 1e-6)), 0.0, 1.0)


def analytic_sdf(scene: AnalyticScene, x, t) -> np.ndarray:
    return scene.sdf(x, t)


def sphere_trace(scene: AnalyticScene, origins, dirs, t, max_steps: int = 512, hit_eps: float = 1e-5,
                 t_max: float = 10.0, polish: int = 400) -> np.ndarray:
    """Ray distances to the first surface hit, NaN on a miss.

    Steps by phi / L. After phi first drops below hit_eps the march continues
    (it cannot overshoot) until phi < 0.01 hit_eps, which keeps grazing hits
    accurate along the ray.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    origins, dirs = np.broadcast_arrays(origins, dirs)
    n = len(dirs)
    depth = np.zeros(n)
    active = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    inv_l = 1.0 / scene.lipschitz
    for _ in range(max_steps + polish):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        phi = scene.sdf(origins[idx] + depth[idx, None] * dirs[idx], t)
        hit[idx] |= phi < hit_eps
        done = (phi < 0.01 * hit_eps) | (depth[idx] > t_max)
        depth[idx] += np.where(done, 0.0, phi * inv_l)
        active[idx[done]] = False
    return np.where(hit & (depth <= t_max), depth, np.nan)


@dataclass
class Frame:
    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    t: int


def default_camera(size: int = 64, distance: float = 1.5, fov_scale: float = 1.25) -> Camera:
    """Camera on the -z axis looking at the origin along +z."""
    f = fov_scale * size
    pose = np.eye(4)
    pose[2, 3] = -distance
    return Camera(f, f, (size - 1) / 2.0, (size - 1) / 2.0, size, size, pose)


def render_gt_frame(scene: AnalyticScene, cam: Camera, t: int, hit_eps: float = 1e-5) -> Frame:
    """Sphere-traced RGB-D frame: z-depth, mask = depth > 0, Lambertian headlight shading."""
    vv, uu = np.mgrid[0:cam.height, 0:cam.width]
    dirs = cam.pixel_dirs(uu.ravel(), vv.ravel())
    origins = np.broadcast_to(cam.center, dirs.shape)
    dist = sphere_trace(scene, origins, dirs, t, hit_eps=hit_eps)
    hit = np.isfinite(dist)
    forward = cam.pose[:3, 2]
    depth = np.zeros(len(dirs))
    depth[hit] = dist[hit] * (dirs[hit] @ forward)
    rgb = np.zeros((len(dirs), 3))
    if hit.any():
        pts = origins[hit] + dist[hit, None] * dirs[hit]
        shade = np.maximum(0.0, (scene.normal(pts, t) * -forward).sum(-1))
        rgb[hit] = scene.albedo_at(pts, t) * shade[:, None]
    shape = (cam.height, cam.width)
    return Frame(rgb.reshape(shape + (3,)), depth.reshape(shape), (depth > 0).reshape(shape).astype(np.uint8), t)


def make_scene(kind: str = "sphere", n_frames: int = 8, **kw) -> AnalyticScene:
    """Desk-scale presets: 'sphere' (translating), 'topology' (two spheres drifting apart), or any shape."""
    if kind == "sphere":
        return AnalyticScene("sphere", n_frames=n_frames, **{"radius": 0.3, "trajectory": "translation",
                                                             "amplitude": 0.15, **kw})
    if kind in ("topology", "two_spheres"):
        return AnalyticScene("two_spheres", n_frames=n_frames, **{"radius": 0.2, "trajectory": "split", **kw})
    return AnalyticScene(kind, n_frames=n_frames, **kw)


# --------------------------------------------------------------------------
# sequence files


@dataclass
class Sequence:
    frames: list[Frame]
    cameras: list[Camera]
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)

    def camera(self, t: int) -> Camera:
        return self.cameras[t]


def generate_sequence(scene: AnalyticScene, cam: Camera, hit_eps: float = 1e-5, depth_noise: float = 0.0,
                      seed: int = 0) -> Sequence:
    """All frames of `scene`; `depth_noise` adds Gaussian jitter (scene units) to valid depths."""
    frames = [render_gt_frame(scene, cam, t, hit_eps) for t in range(scene.n_frames)]
    meta = {"scene": scene.__dict__.copy()}
    if depth_noise > 0:
        rng = np.random.default_rng(seed)
        for f in frames:
            valid = f.depth > 0
            f.depth[valid] = np.maximum(f.depth[valid] + rng.normal(0.0, depth_noise, valid.sum()), 1e-6)
        meta["depth_noise"] = depth_noise
    return Sequence(frames, [cam] * scene.n_frames, meta)


def write_sequence(seq: Sequence, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    names = {"color": "color_%04d.png", "depth": "depth_%04d.png", "mask": "mask_%04d.png"}
    for f in seq.frames:
        rgb = np.clip(np.round(f.rgb * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(os.path.join(directory, names["color"] % f.t))
        q = np.clip(np.round(f.depth * DEPTH_SCALE), 0, 65535).astype(np.uint16)
        Image.fromarray(q).save(os.path.join(directory, names["depth"] % f.t))
        m = np.where(f.mask > 0, 255, 0).astype(np.uint8)
        Image.fromarray(m, "L").save(os.path.join(directory, names["mask"] % f.t))
    cam0 = seq.cameras[0]
    meta = {
        "intrinsics": {k: getattr(cam0, k) for k in ("fx", "fy", "cx", "cy", "width", "height")},
        "pose": cam0.pose.reshape(-1).tolist(),
        "frame_count": len(seq.frames),
        "frames": [f.t for f in seq.frames],
        "depth_scale": DEPTH_SCALE,
        "files": names,
    }
    if any(not np.array_equal(c.pose, cam0.pose) for c in seq.cameras):
        meta["frame_poses"] = [c.pose.reshape(-1).tolist() for c in seq.cameras]
    extra = {k: v for k, v in seq.meta.items() if k not in meta}
    meta.update(json.loads(json.dumps(extra, default=list)))
    tmp = os.path.join(directory, "meta.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(meta, fh, indent=2)
    os.replace(tmp, os.path.join(directory, "meta.json"))


def _read_image(path: str, what: str, t: int) -> np.ndarray:
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing {what} image for frame {t}: {path}")
    try:
        with Image.open(path) as im:
            return np.asarray(im)
    except OSError as exc:
        raise ValueError(f"unreadable {what} image for frame {t}: {path}") from exc


def load_sequence(directory: str) -> Sequence:
    meta_path = os.path.join(directory, "meta.json")
    if not os.path.exists(meta_path):
        raise FileNotFoundError(f"missing sequence metadata: {meta_path}")
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
        intr = meta["intrinsics"]
        names = meta.get("files", {"color": "color_%04d.png", "depth": "depth_%04d.png", "mask": "mask_%04d.png"})
        scale = float(meta.get("depth_scale", DEPTH_SCALE))
        ids = meta.get("frames", list(range(int(meta["frame_count"]))))
    except (KeyError, ValueError, TypeError) as exc:
        raise ValueError(f"malformed sequence metadata {meta_path}: {exc}") from exc
    poses = meta.get("frame_poses")
    frames, cams = [], []
    for i, t in enumerate(ids):
        rgb = _read_image(os.path.join(directory, names["color"] % t), "color", t)
        depth = _read_image(os.path.join(directory, names["depth"] % t), "depth", t)
        mask = _read_image(os.path.join(directory, names["mask"] % t), "mask", t)
        if rgb.ndim == 3:
            rgb = rgb[..., :3]
        frames.append(Frame(rgb.astype(np.float64) / 255.0, depth.astype(np.float64) / scale,
                            (mask > 127).astype(np.uint8), int(t)))
        pose = poses[i] if poses else meta.get("pose", np.eye(4).reshape(-1).tolist())
        cams.append(Camera(float(intr["fx"]), float(intr["fy"]), float(intr["cx"]), float(intr["cy"]),
                           int(intr["width"]), int(intr["height"]), np.asarray(pose).reshape(4, 4)))
    return Sequence(frames, cams, meta)
