"""numba kernels for trilinear interpolation with spatial tangents.

Coordinates `u` are in cell units, already clamped to [0, N]. `du` holds the
tangent directions (T of them) in the same units. Grid node (i, j, k) sits at
origin + (i, j, k) * cell.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def trilerp_forward(grid, c0, c1, u, du, out):
    n_nodes = grid.shape[0]
    last = n_nodes - 2
    m = u.shape[0]
    n_tan = du.shape[0]
    nc = c1 - c0
    for n in range(m):
        ix = min(int(np.floor(u[n, 0])), last)
        iy = min(int(np.floor(u[n, 1])), last)
        iz = min(int(np.floor(u[n, 2])), last)
        fx = u[n, 0] - ix
        fy = u[n, 1] - iy
        fz = u[n, 2] - iz
        for cx in range(2):
            wx = fx if cx else 1.0 - fx
            dx = 1.0 if cx else -1.0
            for cy in range(2):
                wy = fy if cy else 1.0 - fy
                dy = 1.0 if cy else -1.0
                for cz in range(2):
                    wz = fz if cz else 1.0 - fz
                    dz = 1.0 if cz else -1.0
                    w = wx * wy * wz
                    gxw = dx * wy * wz
                    gyw = wx * dy * wz
                    gzw = wx * wy * dz
                    node = grid[ix + cx, iy + cy, iz + cz]
                    for c in range(nc):
                        out[0, n, c] += w * node[c0 + c]
                    for t in range(n_tan):
                        tw = gxw * du[t, n, 0] + gyw * du[t, n, 1] + gzw * du[t, n, 2]
                        for c in range(nc):
                            out[1 + t, n, c] += tw * node[c0 + c]


@njit(cache=True)
def trilerp_backward(grid, c0, c1, u, du, g, node_idx, node_grad, gu, gdu):
    n_nodes = grid.shape[0]
    last = n_nodes - 2
    m = u.shape[0]
    n_tan = du.shape[0]
    nc = c1 - c0
    st = np.zeros(n_tan, dtype=g.dtype)
    tw = np.zeros(n_tan, dtype=g.dtype)
    for n in range(m):
        ix = min(int(np.floor(u[n, 0])), last)
        iy = min(int(np.floor(u[n, 1])), last)
        iz = min(int(np.floor(u[n, 2])), last)
        fx = u[n, 0] - ix
        fy = u[n, 1] - iy
        fz = u[n, 2] - iz
        q = 0
        for cx in range(2):
            wx = fx if cx else 1.0 - fx
            dx = 1.0 if cx else -1.0
            for cy in range(2):
                wy = fy if cy else 1.0 - fy
                dy = 1.0 if cy else -1.0
                for cz in range(2):
                    wz = fz if cz else 1.0 - fz
                    dz = 1.0 if cz else -1.0
                    w = wx * wy * wz
                    gxw = dx * wy * wz
                    gyw = wx * dy * wz
                    gzw = wx * wy * dz
                    hxy = dx * dy * wz
                    hxz = dx * wy * dz
                    hyz = wx * dy * dz
                    i = ix + cx
                    j = iy + cy
                    k = iz + cz
                    node_idx[n, q] = (i * n_nodes + j) * n_nodes + k
                    node = grid[i, j, k]
                    s0 = 0.0
                    for c in range(nc):
                        s0 += g[0, n, c] * node[c0 + c]
                    for t in range(n_tan):
                        tw[t] = gxw * du[t, n, 0] + gyw * du[t, n, 1] + gzw * du[t, n, 2]
                        acc = 0.0
                        for c in range(nc):
                            acc += g[1 + t, n, c] * node[c0 + c]
                        st[t] = acc
                    for c in range(nc):
                        v = w * g[0, n, c]
                        for t in range(n_tan):
                            v += tw[t] * g[1 + t, n, c]
                        node_grad[n, q, c0 + c] = v
                    ax = gxw * s0
                    ay = gyw * s0
                    az = gzw * s0
                    for t in range(n_tan):
                        ax += st[t] * (hxy * du[t, n, 1] + hxz * du[t, n, 2])
                        ay += st[t] * (hxy * du[t, n, 0] + hyz * du[t, n, 2])
                        az += st[t] * (hxz * du[t, n, 0] + hyz * du[t, n, 1])
                        gdu[t, n, 0] += gxw * st[t]
                        gdu[t, n, 1] += gyw * st[t]
                        gdu[t, n, 2] += gzw * st[t]
                    gu[n, 0] += ax
                    gu[n, 1] += ay
                    gu[n, 2] += az
                    q += 1


@njit(cache=True)
def scatter_rows(inverse, rows, out):
    """out[inverse[r]] += rows[r], in row order (deterministic)."""
    for r in range(rows.shape[0]):
        o = inverse[r]
        for c in range(rows.shape[1]):
            out[o, c] += rows[r, c]
