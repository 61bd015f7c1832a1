"""Ray-triangle intersection against a BVH-accelerated mesh.

The BVH is built once per mesh in numpy (median split on the longest
centroid axis); traversal and Moller-Trumbore tests run in numba. All
rays share one origin, which fits the pinhole cameras used here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

LEAF_SIZE = 8
_EDGE_EPS = 1e-9      # barycentric slack so shared edges are never missed
_T_MIN = 1e-9


@dataclass
class Bvh:
    node_lo: np.ndarray     # (K, 3) float64
    node_hi: np.ndarray     # (K, 3)
    node_left: np.ndarray   # (K,) int64, -1 for leaves
    node_right: np.ndarray  # (K,) int64
    node_first: np.ndarray  # (K,) int64 offset into tri_order
    node_count: np.ndarray  # (K,) int64, 0 for internal nodes
    tri_order: np.ndarray   # (M,) int64
    v0: np.ndarray          # (M, 3) per-triangle first vertex
    e1: np.ndarray          # (M, 3) v1 - v0
    e2: np.ndarray          # (M, 3) v2 - v0

    def raycast(self, origin, dirs) -> tuple[np.ndarray, np.ndarray,
                                             np.ndarray, np.ndarray]:
        """Nearest hits for unit rays from one origin.

        Returns (t, tri_index, u, v); misses have t = inf, tri = -1.
        """
        origin = np.ascontiguousarray(origin, dtype=np.float64).reshape(3)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
        n = len(dirs)
        out_t = np.full(n, np.inf)
        out_tri = np.full(n, -1, np.int64)
        out_u = np.zeros(n)
        out_v = np.zeros(n)
        _raycast_kernel(origin, dirs, self.node_lo, self.node_hi,
                        self.node_left, self.node_right, self.node_first,
                        self.node_count, self.tri_order, self.v0, self.e1,
                        self.e2, out_t, out_tri, out_u, out_v)
        return out_t, out_tri, out_u, out_v


def build_bvh(vertices: np.ndarray, faces: np.ndarray) -> Bvh:
    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    m = len(faces)
    if m == 0:
        raise ValueError("cannot build a BVH over an empty mesh")
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    tlo = np.minimum(np.minimum(a, b), c)
    thi = np.maximum(np.maximum(a, b), c)
    cent = 0.5 * (tlo + thi)

    order = np.arange(m, dtype=np.int64)
    lo, hi, left, right, first, count = [], [], [], [], [], []

    def new_node():
        lo.append(None)
        hi.append(None)
        left.append(-1)
        right.append(-1)
        first.append(0)
        count.append(0)
        return len(lo) - 1

    stack = [(new_node(), 0, m)]
    while stack:
        node, s, e = stack.pop()
        seg = order[s:e]
        lo[node] = tlo[seg].min(axis=0)
        hi[node] = thi[seg].max(axis=0)
        if e - s <= LEAF_SIZE:
            first[node] = s
            count[node] = e - s
            continue
        cseg = cent[seg]
        axis = int(np.argmax(cseg.max(axis=0) - cseg.min(axis=0)))
        mid = (s + e) // 2
        part = np.argpartition(cseg[:, axis], mid - s)
        order[s:e] = seg[part]
        ln, rn = new_node(), new_node()
        left[node] = ln
        right[node] = rn
        stack.append((ln, s, mid))
        stack.append((rn, mid, e))

    return Bvh(
        np.array(lo), np.array(hi),
        np.array(left, np.int64), np.array(right, np.int64),
        np.array(first, np.int64), np.array(count, np.int64),
        order,
        np.ascontiguousarray(a), np.ascontiguousarray(b - a),
        np.ascontiguousarray(c - a),
    )


@njit(cache=True)
def _raycast_kernel(origin, dirs, node_lo, node_hi, node_left, node_right,
                    node_first, node_count, tri_order, v0, e1, e2,
                    out_t, out_tri, out_u, out_v):
    ox, oy, oz = origin[0], origin[1], origin[2]
    stack = np.empty(128, np.int64)
    for ri in range(dirs.shape[0]):
        dx, dy, dz = dirs[ri, 0], dirs[ri, 1], dirs[ri, 2]
        ix = 1.0 / dx if dx != 0.0 else 1e300
        iy = 1.0 / dy if dy != 0.0 else 1e300
        iz = 1.0 / dz if dz != 0.0 else 1e300
        best = np.inf
        best_tri = -1
        best_u = 0.0
        best_v = 0.0
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            # slab test
            t1 = (node_lo[node, 0] - ox) * ix
            t2 = (node_hi[node, 0] - ox) * ix
            near = min(t1, t2)
            far = max(t1, t2)
            t1 = (node_lo[node, 1] - oy) * iy
            t2 = (node_hi[node, 1] - oy) * iy
            near = max(near, min(t1, t2))
            far = min(far, max(t1, t2))
            t1 = (node_lo[node, 2] - oz) * iz
            t2 = (node_hi[node, 2] - oz) * iz
            near = max(near, min(t1, t2))
            far = min(far, max(t1, t2))
            if near > far or far < 0.0 or near > best:
                continue
            cnt = node_count[node]
            if cnt == 0:
                stack[sp] = node_left[node]
                sp += 1
                stack[sp] = node_right[node]
                sp += 1
                continue
            f0 = node_first[node]
            for k in range(f0, f0 + cnt):
                tri = tri_order[k]
                e1x, e1y, e1z = e1[tri, 0], e1[tri, 1], e1[tri, 2]
                e2x, e2y, e2z = e2[tri, 0], e2[tri, 1], e2[tri, 2]
                px = dy * e2z - dz * e2y
                py = dz * e2x - dx * e2z
                pz = dx * e2y - dy * e2x
                det = e1x * px + e1y * py + e1z * pz
                if det > -1e-14 and det < 1e-14:
                    continue
                inv = 1.0 / det
                tx = ox - v0[tri, 0]
                ty = oy - v0[tri, 1]
                tz = oz - v0[tri, 2]
                u = (tx * px + ty * py + tz * pz) * inv
                if u < -_EDGE_EPS or u > 1.0 + _EDGE_EPS:
                    continue
                qx = ty * e1z - tz * e1y
                qy = tz * e1x - tx * e1z
                qz = tx * e1y - ty * e1x
                v = (dx * qx + dy * qy + dz * qz) * inv
                if v < -_EDGE_EPS or u + v > 1.0 + _EDGE_EPS:
                    continue
                t = (e2x * qx + e2y * qy + e2z * qz) * inv
                if t > _T_MIN and t < best:
                    best = t
                    best_tri = tri
                    best_u = u
                    best_v = v
        out_t[ri] = best
        out_tri[ri] = best_tri
        out_u[ri] = best_u
        out_v[ri] = best_v
