"""Geometric error of a reconstruction against masked, back-projected ground-truth depth."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..scene import Sequence
from .train import ray_distance

log = logging.getLogger(__name__)


@dataclass
class FrameError:
    t: int
    mean: float
    median: float
    max: float
    count: int


@dataclass
class EvalReport:
    frames: list[FrameError] = field(default_factory=list)
    mode: str = "sdf"
    unit: str = "scene units"

    @property
    def mean(self) -> float:
        return float(np.mean([f.mean for f in self.frames])) if self.frames else float("nan")

    @property
    def median(self) -> float:
        return float(np.median([f.median for f in self.frames])) if self.frames else float("nan")

    def format(self, scale: float = 1.0, unit: str | None = None) -> str:
        unit = unit or self.unit
        lines = [f"# geometric error ({self.mode} mode, {unit})", "frame    mean      median    points"]
        for f in self.frames:
            lines.append(f"{f.t:5d}  {f.mean * scale:9.5f}  {f.median * scale:9.5f}  {f.count:7d}")
        lines.append(f"Mean     {self.mean * scale:9.5f}")
        lines.append(f"Median   {self.median * scale:9.5f}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "mean": self.mean, "median": self.median,
                "frames": [f.__dict__ for f in self.frames]}


def backproject(seq: Sequence, t: int) -> np.ndarray:
    """3D points of the masked pixels with valid depth in frame t."""
    f, cam = seq.frames[t], seq.cameras[t]
    dist = ray_distance(cam, f.depth)
    h, w = f.depth.shape
    vv, uu = np.mgrid[0:h, 0:w]
    keep = (f.mask.ravel() > 0) & (dist > 0)
    dirs = cam.pixel_dirs(uu.ravel()[keep], vv.ravel()[keep])
    return cam.center + dist[keep, None] * dirs


def evaluate_fn(distance_fn, seq: Sequence, mode: str = "sdf") -> EvalReport:
    """`distance_fn(points, t) -> unsigned distances`; frames with empty masks are skipped."""
    report = EvalReport(mode=mode)
    for t in range(len(seq)):
        pts = backproject(seq, t)
        if len(pts) == 0:
            warnings.warn(f"frame {t}: empty mask, skipped")
            continue
        err = np.abs(np.asarray(distance_fn(pts, t), dtype=np.float64))
        report.frames.append(FrameError(t, float(err.mean()), float(np.median(err)), float(err.max()), len(err)))
    return report


def evaluate_model(model, seq: Sequence) -> EvalReport:
    """|phi_t| of the reconstruction at the back-projected depth points."""
    return evaluate_fn(model.sdf_values, seq, "sdf")


def point_triangle_distance(points: np.ndarray, tri: np.ndarray, pairs: int = 400_000) -> np.ndarray:
    """Unsigned distance from each point (N, 3) to the nearest triangle (M, 3, 3).

    Exact: the distance to the nearest vertex bounds the answer from above, so
    only triangles whose centroid lies within that bound plus the largest
    centroid-to-vertex radius are tested. Work is chunked to about `pairs`
    point-triangle pairs at a time.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = np.asarray(tri, dtype=np.float64).reshape(-1, 3, 3)
    if len(tri) == 0:
        return np.full(len(points), np.inf)
    if len(points) == 0:
        return np.zeros(0)
    bound, _ = cKDTree(tri.reshape(-1, 3)).query(points)
    cent = tri.mean(axis=1)
    reach = float(np.linalg.norm(tri - cent[:, None], axis=-1).max())
    cand = cKDTree(cent).query_ball_point(points, bound + reach + 1e-12)
    counts = np.fromiter((len(c) for c in cand), dtype=np.int64, count=len(points))
    pi = np.repeat(np.arange(len(points)), counts)
    ti = np.fromiter((j for c in cand for j in c), dtype=np.int64, count=int(counts.sum()))
    best = np.full(len(points), np.inf)
    for s in range(0, len(pi), pairs):
        p, t = pi[s:s + pairs], ti[s:s + pairs]
        a, b, c = tri[t, 0], tri[t, 1], tri[t, 2]
        np.minimum.at(best, p, _closest_sq(points[p], a, b, c, b - a, c - a))
    return np.sqrt(best)


def _closest_sq(p, a, b, c, ab, ac):
    """Squared distance to triangles via the Voronoi-region method (Ericson, Real-Time Collision Detection)."""
    dot = lambda u, v: np.einsum("...k,...k->...", u, v)
    ap = p - a
    d1, d2 = dot(ab, ap), dot(ac, ap)
    bp = p - b
    d3, d4 = dot(ab, bp), dot(ac, bp)
    cp = p - c
    d5, d6 = dot(ab, cp), dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = va + vb + vc
    with np.errstate(divide="ignore", invalid="ignore"):
        v_in = vb / denom
        w_in = vc / denom
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    # start with the interior projection and overwrite by region
    q = a + v_in[..., None] * ab + w_in[..., None] * ac
    # applied from lowest to highest precedence: edges BC, AC, vertex C, edge AB, vertices B, A
    regions = [
        ((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + t_bc[..., None] * (c - b)),
        ((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + t_ac[..., None] * ac),
        ((d6 >= 0) & (d5 <= d6), np.broadcast_to(c, q.shape)),
        ((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + t_ab[..., None] * ab),
        ((d3 >= 0) & (d4 <= d3), np.broadcast_to(b, q.shape)),
        ((d1 <= 0) & (d2 <= 0), np.broadcast_to(a, q.shape)),
    ]
    for cond, val in regions:
        q = np.where(cond[..., None], val, q)
    diff = p - q
    return dot(diff, diff)


def evaluate_mesh(mesh_for_frame, seq: Sequence) -> EvalReport:
    """`mesh_for_frame(t) -> Mesh`; point-to-triangle distances to that mesh."""
    cache = {}

    def dist(pts, t):
        if t not in cache:
            m = mesh_for_frame(t)
            cache[t] = m.vertices[m.faces] if len(m.faces) else np.zeros((0, 3, 3))
        return point_triangle_distance(pts, cache[t])

    return evaluate_fn(dist, seq, "mesh")
