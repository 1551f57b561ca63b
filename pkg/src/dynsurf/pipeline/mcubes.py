"""Marching cubes with a case table generated from face rules, and PLY output.

Corner c of a cell sits at offset (c & 1, c >> 1 & 1, c >> 2 & 1). A corner is
negative when its value is below the iso level. On each cube face the
crossing points are joined so that negative corners are kept apart (the
ambiguous diagonal face separates the two negatives); the face segments
chain into closed loops on the cube surface, and each loop is fanned into
triangles facing the positive side.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

CORNERS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)])
EDGES = [(a, a | (1 << ax)) for ax in range(3) for a in range(8) if not a & (1 << ax)]
EDGE_AXIS = np.array([int(np.log2(b - a)) for a, b in EDGES])
EDGE_ORIGIN = np.array([CORNERS[a] for a, _ in EDGES])
_EDGE_ID = {frozenset(e): i for i, e in enumerate(EDGES)}


def _faces() -> list[list[int]]:
    """Corner cycles of the six faces, counter-clockwise seen from outside the cube."""
    faces = []
    for ax in range(3):
        u, v = (ax + 1) % 3, (ax + 2) % 3
        for side in (0, 1):
            cyc = []
            for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                p = [0, 0, 0]
                p[ax], p[u], p[v] = side, du, dv
                cyc.append(p[0] + 2 * p[1] + 4 * p[2])
            faces.append(cyc if side == 1 else cyc[::-1])
    return faces


FACES = _faces()


def case_loops(case: int) -> list[list[int]]:
    """Closed loops of edge ids for a sign configuration (bit c set = corner c negative)."""
    neg = [(case >> c) & 1 for c in range(8)]
    nxt = {}
    for cyc in FACES:
        n = len(cyc)
        edges = [_EDGE_ID[frozenset((cyc[i], cyc[(i + 1) % n]))] for i in range(n)]
        # for each run of negative corners, join its exit edge back to its entry edge
        for i in range(n):
            if neg[cyc[i]] and not neg[cyc[i - 1]]:
                j = i
                while neg[cyc[(j + 1) % n]]:
                    j = (j + 1) % n
                entry, exit_ = edges[i - 1], edges[j]
                nxt[exit_] = entry
    loops, seen = [], set()
    for start in sorted(nxt):
        if start in seen:
            continue
        loop, e = [], start
        while e not in seen:
            seen.add(e)
            loop.append(e)
            e = nxt[e]
        loops.append(loop)
    return loops


def _fan(loop: list[int]) -> list[tuple[int, int, int]]:
    return [(loop[0], loop[i], loop[i + 1]) for i in range(1, len(loop) - 1)]


def _orientation_sign() -> int:
    """+1 if fanned loops already face the positive side, else -1 (checked on a single corner)."""
    loop = case_loops(1)[0]
    mids = [(CORNERS[EDGES[e][0]] + CORNERS[EDGES[e][1]]) / 2.0 for e in loop[:3]]
    n = np.cross(mids[1] - mids[0], mids[2] - mids[0])
    return 1 if n @ (np.ones(3) / 3.0 - mids[0]) > 0 else -1


_SIGN = _orientation_sign()


def build_table() -> list[np.ndarray]:
    table = []
    for case in range(256):
        tris = [t for loop in case_loops(case) for t in _fan(loop if _SIGN > 0 else loop[::-1])]
        table.append(np.array(tris, dtype=np.int64).reshape(-1, 3))
    return table


TRI_TABLE = build_table()


def cube_rotations() -> list[np.ndarray]:
    """The 24 proper rotations of the cube as signed permutation matrices."""
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            m = np.zeros((3, 3), dtype=np.int64)
            for i, (p, s) in enumerate(zip(perm, signs)):
                m[i, p] = s
            if round(np.linalg.det(m)) == 1:
                mats.append(m)
    return mats


def rotate_corner_map(rot: np.ndarray) -> np.ndarray:
    """corner index -> rotated corner index."""
    q = rot @ (2 * CORNERS.T - 1)
    p = (q + 1) // 2
    return p[0] + 2 * p[1] + 4 * p[2]


# --------------------------------------------------------------------------
# extraction


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None

    def __len__(self):
        return len(self.faces)

    def areas(self) -> np.ndarray:
        if len(self.faces) == 0:
            return np.zeros(0)
        t = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=-1)

    def signed_volume(self) -> float:
        if len(self.faces) == 0:
            return 0.0
        t = self.vertices[self.faces]
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)


def marching_cubes(values: np.ndarray, origin=(0.0, 0.0, 0.0), spacing=(1.0, 1.0, 1.0), level: float = 0.0,
                   min_area: float = 1e-12) -> Mesh:
    """Triangulate the `level` set of node values (n0, n1, n2); triangles face increasing values."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3 or min(values.shape) < 2:
        raise ValueError("need a 3D array with at least two nodes per axis")
    n0, n1, n2 = values.shape
    neg = values < level
    case = np.zeros((n0 - 1, n1 - 1, n2 - 1), dtype=np.int64)
    for c, (x, y, z) in enumerate(CORNERS):
        case |= neg[x:n0 - 1 + x, y:n1 - 1 + y, z:n2 - 1 + z].astype(np.int64) << c
    n_nodes = values.size
    strides = np.array([n1 * n2, n2, 1])
    tris = []
    for c in np.unique(case):
        tab = TRI_TABLE[c]
        if len(tab) == 0:
            continue
        cells = np.argwhere(case == c)                                  # (K, 3)
        node = cells[:, None, :] + EDGE_ORIGIN[None, :, :]             # (K, 12, 3)
        gid = EDGE_AXIS[None, :] * n_nodes + node @ strides             # (K, 12)
        tris.append(gid[:, tab].reshape(-1, 3))
    if not tris:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    tris = np.concatenate(tris)
    uniq, inv = np.unique(tris, return_inverse=True)
    faces = inv.reshape(-1, 3)
    axis, flat = np.divmod(uniq, n_nodes)
    ijk = np.stack(np.unravel_index(flat, values.shape), axis=-1)
    step = np.eye(3, dtype=np.int64)[axis]
    va = values[tuple(ijk.T)]
    vb = values[tuple((ijk + step).T)]
    frac = (level - va) / (vb - va)
    pos = np.asarray(origin, dtype=np.float64) + np.asarray(spacing, dtype=np.float64) * (ijk + frac[:, None] * step)
    mesh = Mesh(pos, faces)
    keep = mesh.areas() > min_area
    return Mesh(pos, faces[keep])


def sample_grid(fn, lo, hi, resolution: int, chunk: int = 65536) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """fn(points (M, 3)) on a (resolution+1)^3 lattice over [lo, hi]; returns (values, origin, spacing)."""
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    axes = [np.linspace(lo[a], hi[a], resolution + 1) for a in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.concatenate([np.asarray(fn(pts[s:s + chunk]), dtype=np.float64) for s in range(0, len(pts), chunk)])
    return vals.reshape((resolution + 1,) * 3), lo, (hi - lo) / resolution


def extract_mesh(model, t: int, resolution: int = 64, lo=None, hi=None) -> Mesh:
    """Observation-space surface of frame t: zero level set of phi_t over the scene box."""
    lo = np.asarray(model.cfg.box_origin if lo is None else lo, dtype=np.float64)
    hi = lo + np.asarray(model.cfg.box_extent) if hi is None else np.asarray(hi, dtype=np.float64)
    vals, origin, spacing = sample_grid(lambda p: model.sdf_values(p, t), lo, hi, resolution)
    mesh = marching_cubes(vals, origin, spacing)
    if len(mesh.vertices):
        n = model.normals(mesh.vertices, t)
        mesh.normals = n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
    return mesh


def write_ply(mesh: Mesh, path: str, comments: list[str] | None = None) -> None:
    """ASCII PLY with optional comment lines in the header."""
    has_n = mesh.normals is not None and len(mesh.normals) == len(mesh.vertices)
    lines = ["ply", "format ascii 1.0"]
    lines += [f"comment {c}" for c in comments or []]
    lines.append(f"element vertex {len(mesh.vertices)}")
    lines += [f"property float {a}" for a in ("x", "y", "z")]
    if has_n:
        lines += [f"property float {a}" for a in ("nx", "ny", "nz")]
    lines += [f"element face {len(mesh.faces)}", "property list uchar int vertex_indices", "end_header"]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        for i, v in enumerate(mesh.vertices):
            row = " ".join(f"{x:.7g}" for x in v)
            if has_n:
                row += " " + " ".join(f"{x:.6g}" for x in mesh.normals[i])
            fh.write(row + "\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


def read_ply(path: str) -> tuple[Mesh, list[str]]:
    """Read the ASCII PLY files written by `write_ply`; returns (mesh, comments)."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "ply":
        raise ValueError(f"not a PLY file: {path}")
    comments, nv, nf, props, i = [], 0, 0, 0, 1
    while lines[i] != "end_header":
        parts = lines[i].split()
        if parts[0] == "comment":
            comments.append(lines[i][len("comment "):])
        elif parts[:2] == ["element", "vertex"]:
            nv = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            nf = int(parts[2])
        elif parts[0] == "property" and parts[1] != "list":
            props += 1
        i += 1
    i += 1
    v = np.array([[float(x) for x in lines[i + k].split()] for k in range(nv)]).reshape(nv, props)
    f = np.array([[int(x) for x in lines[i + nv + k].split()[1:4]] for k in range(nf)], dtype=np.int64).reshape(nf, 3)
    return Mesh(v[:, :3], f, v[:, 3:6] if props >= 6 else None), comments
