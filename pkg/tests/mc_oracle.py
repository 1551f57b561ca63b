"""Independent checks of the marching-cubes case table, shared by the test modules."""

from collections import Counter

import numpy as np

from dynsurf.pipeline.mcubes import CORNERS, EDGES, case_loops, cube_rotations, marching_cubes, rotate_corner_map


def embedded_case(case: int) -> np.ndarray:
    """A 4^3 node grid, positive everywhere except the case's negative corners of the middle cell."""
    vals = np.ones((4, 4, 4))
    for c, (x, y, z) in enumerate(CORNERS):
        if (case >> c) & 1:
            vals[1 + x, 1 + y, 1 + z] = -1.0
    return vals


def closed_and_oriented(mesh) -> bool:
    """Every directed edge is matched by exactly one reversed edge and none repeats."""
    directed = Counter()
    for a, b, c in mesh.faces:
        for e in ((a, b), (b, c), (c, a)):
            directed[e] += 1
    return all(n == 1 and directed[(e[1], e[0])] == 1 for e, n in directed.items())


def case_is_watertight(case: int) -> bool:
    mesh = marching_cubes(embedded_case(case))
    if case == 0:
        return len(mesh.faces) == 0
    return len(mesh.faces) > 0 and closed_and_oriented(mesh) and mesh.signed_volume() > 0


def _edge_map(corner_map):
    ids = {frozenset(e): i for i, e in enumerate(EDGES)}
    return [ids[frozenset((corner_map[a], corner_map[b]))] for a, b in EDGES]


def _canonical(loops):
    out = []
    for loop in loops:
        k = int(np.argmin(loop))
        out.append(tuple(loop[k:] + loop[:k]))
    return sorted(out)


def case_is_rotation_consistent(case: int) -> bool:
    """Rotating the cube maps the loops of a case onto the loops of the rotated case."""
    base = case_loops(case)
    for rot in cube_rotations():
        cmap = rotate_corner_map(rot)
        emap = _edge_map(cmap)
        rotated = sum(1 << int(cmap[c]) for c in range(8) if (case >> c) & 1)
        mapped = [[emap[e] for e in loop] for loop in base]
        if _canonical(mapped) != _canonical(case_loops(rotated)):
            return False
    return True


def validate_table() -> tuple[int, int]:
    """(# watertight cases, # rotation-consistent cases) out of 256."""
    tight = sum(case_is_watertight(c) for c in range(256))
    sym = sum(case_is_rotation_consistent(c) for c in range(256))
    return tight, sym
