"""Per-pixel signed distances from a registered cloud to the ground-truth
mesh, and their temporal aggregation into the three evaluation metrics:

- depth accuracy: per-pixel mean of the signed error over frames,
- time variability: per-pixel sample SD of the signed error over frames,
- shape precision: per-pixel |mean - across-pixel mean of means|,
  insensitive to global depth shifts.

Sign convention: positive error means the measured point lies closer to
the camera than the ground-truth surface.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

from .geom import RigidTransform, apply
from .meshio import FrameSequence, OrganizedCloud, TriangleMesh

DEGENERATE_CROSS = 1e-12   # collinearity threshold on the 3-vertex triangle
MIN_SD_SUPPORT = 2         # sample SD needs at least two frames


class VertexIndex3:
    """Nearest-vertex spatial index over a mesh (k-d tree, leaf size 16).

    Also owns the mesh-derived adjacency used by the exact-face mode and
    the boundary-vertex diagnostic mask, built lazily.
    """

    def __init__(self, mesh: TriangleMesh):
        self.mesh = mesh
        self._tree = cKDTree(mesh.vertices, leafsize=16)
        self._vf_offsets = None
        self._vf_faces = None
        self._boundary = None

    @property
    def vertex_count(self) -> int:
        return len(self.mesh.vertices)

    def query3(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Distances and ids of the 3 nearest vertices per query point,
        sorted by distance."""
        if self.vertex_count < 3:
            raise ValueError("mesh has fewer than 3 vertices")
        d, i = self._tree.query(np.asarray(points, np.float64), k=3, workers=-1)
        return d.reshape(-1, 3), i.astype(np.int64).reshape(-1, 3)

    def incident_faces(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR arrays mapping each vertex to the faces that touch it."""
        if self._vf_offsets is None:
            faces = self.mesh.faces
            vids = faces.ravel()
            fids = np.repeat(np.arange(len(faces), dtype=np.int64), 3)
            order = np.argsort(vids, kind="stable")
            sorted_v = vids[order]
            self._vf_faces = fids[order]
            self._vf_offsets = np.searchsorted(
                sorted_v, np.arange(self.vertex_count + 1))
        return self._vf_offsets, self._vf_faces

    def boundary_vertices(self) -> np.ndarray:
        """Boolean mask of vertices lying on a mesh boundary (incident to
        an edge used by exactly one face)."""
        if self._boundary is None:
            faces = self.mesh.faces
            mask = np.zeros(self.vertex_count, bool)
            if len(faces):
                edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]],
                                        faces[:, [2, 0]]])
                edges.sort(axis=1)
                uniq, counts = np.unique(edges, axis=0, return_counts=True)
                border = uniq[counts == 1]
                mask[border.ravel()] = True
            self._boundary = mask
        return self._boundary


@dataclass
class ErrorField:
    """Per-pixel signed error against the mesh, with the closest surface
    point and the 3-vertex footprint of each lookup."""

    width: int
    height: int
    valid: np.ndarray        # (H, W) bool
    error: np.ndarray        # (H, W) float64, meters
    closest: np.ndarray      # (H, W, 3) float64, organ frame
    footprint: np.ndarray    # (H, W, 3) int64 vertex ids, -1 where invalid
    degenerate_pixels: int = 0
    boundary_pixels: int = 0


@dataclass
class MetricFields:
    """Per-pixel temporal aggregates of the signed error."""

    width: int
    height: int
    valid: np.ndarray        # (H, W) bool
    mean: np.ndarray         # (H, W) float64
    sd: np.ndarray           # (H, W) float64
    shifted_ae: np.ndarray   # (H, W) float64
    support: np.ndarray      # (H, W) int32 frames per pixel

    METRICS = ("mean", "sd", "shifted_ae")

    def metric(self, name: str) -> np.ndarray:
        if name not in self.METRICS:
            raise ValueError(f"unknown metric {name!r}")
        return getattr(self, name)


def signed_error_frame(cloud: OrganizedCloud, t_co: RigidTransform,
                       mesh: TriangleMesh, index: VertexIndex3,
                       exact_face: bool = False) -> ErrorField:
    """Signed error of every valid pixel of one frame.

    Each camera point is moved into the organ frame, its 3 nearest mesh
    vertices form a triangle whose unit normal is oriented toward the
    camera center; the error is the projection of (point - centroid)
    onto that normal. Pixels whose 3 vertices are collinear are marked
    invalid and tallied.

    With exact_face=True, the distance is instead the true point-to-
    triangle distance over the faces incident to the nearest vertex
    (a cross-check mode; the footprint is then the chosen face).
    """
    h, w = cloud.height, cloud.width
    field = ErrorField(w, h,
                       np.zeros((h, w), bool),
                       np.zeros((h, w), np.float64),
                       np.zeros((h, w, 3), np.float64),
                       np.full((h, w, 3), -1, np.int64))
    vmask = cloud.valid
    if not vmask.any():
        return field
    pts = cloud.points[vmask]
    q = apply(t_co, pts)
    cam = t_co.translation

    if exact_face:
        _, idx = index.query3(q)
        nearest = idx[:, 0]
        off, lst = index.incident_faces()
        err = np.zeros(len(q))
        cp = np.zeros((len(q), 3))
        fp = np.zeros((len(q), 3), np.int64)
        ok = np.zeros(len(q), np.uint8)
        _exact_face_kernel(q, nearest, off, lst, mesh.vertices, mesh.faces,
                           cam, err, cp, fp, ok)
        good = ok == 1
    else:
        _, idx = index.query3(q)
        v0 = mesh.vertices[idx[:, 0]]
        v1 = mesh.vertices[idx[:, 1]]
        v2 = mesh.vertices[idx[:, 2]]
        n = np.cross(v1 - v0, v2 - v0)
        nn = np.linalg.norm(n, axis=1)
        good = nn > DEGENERATE_CROSS
        nn_safe = np.where(good, nn, 1.0)
        n = n / nn_safe[:, None]
        c = (v0 + v1 + v2) / 3.0
        side = np.einsum("ij,ij->i", n, cam[None, :] - c)
        good &= side != 0.0
        n *= np.sign(side)[:, None]
        err = np.einsum("ij,ij->i", q - c, n)
        cp = c
        fp = idx

    sub = np.zeros(vmask.sum(), bool)
    sub[good] = True
    flat_valid = np.zeros((h, w), bool)
    flat_valid[vmask] = sub
    field.valid = flat_valid
    field.error[vmask] = np.where(good, err, 0.0)
    field.closest[vmask] = np.where(good[:, None], cp, 0.0)
    field.footprint[vmask] = np.where(good[:, None], fp, -1)
    field.degenerate_pixels = int(len(q) - good.sum())
    boundary = index.boundary_vertices()
    if boundary.any() and good.any():
        field.boundary_pixels = int(boundary[fp[good]].any(axis=1).sum())
    return field


@njit(cache=True)
def _closest_point_on_triangle(ax, ay, az, bx, by, bz, cx, cy, cz,
                               px, py, pz):
    """Closest point to p on triangle abc (Ericson's region test)."""
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        return ax + t * abx, ay + t * aby, az + t * abz
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        return ax + t * acx, ay + t * acy, az + t * acz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return bx + t * (cx - bx), by + t * (cy - by), bz + t * (cz - bz)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return (ax + abx * v + acx * w, ay + aby * v + acy * w,
            az + abz * v + acz * w)


@njit(cache=True)
def _exact_face_kernel(q, nearest, vf_off, vf_list, verts, faces, cam,
                       out_err, out_cp, out_fp, out_ok):
    for i in range(q.shape[0]):
        px, py, pz = q[i, 0], q[i, 1], q[i, 2]
        nv = nearest[i]
        best_d2 = np.inf
        best_face = -1
        bx = by = bz = 0.0
        for k in range(vf_off[nv], vf_off[nv + 1]):
            fi = vf_list[k]
            i0, i1, i2 = faces[fi, 0], faces[fi, 1], faces[fi, 2]
            cxp, cyp, czp = _closest_point_on_triangle(
                verts[i0, 0], verts[i0, 1], verts[i0, 2],
                verts[i1, 0], verts[i1, 1], verts[i1, 2],
                verts[i2, 0], verts[i2, 1], verts[i2, 2],
                px, py, pz)
            dx, dy, dz = px - cxp, py - cyp, pz - czp
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < best_d2:
                best_d2 = d2
                best_face = fi
                bx, by, bz = cxp, cyp, czp
        if best_face < 0:
            out_ok[i] = 0
            continue
        i0, i1, i2 = faces[best_face, 0], faces[best_face, 1], faces[best_face, 2]
        e1x = verts[i1, 0] - verts[i0, 0]
        e1y = verts[i1, 1] - verts[i0, 1]
        e1z = verts[i1, 2] - verts[i0, 2]
        e2x = verts[i2, 0] - verts[i0, 0]
        e2y = verts[i2, 1] - verts[i0, 1]
        e2z = verts[i2, 2] - verts[i0, 2]
        nx = e1y * e2z - e1z * e2y
        ny = e1z * e2x - e1x * e2z
        nz = e1x * e2y - e1y * e2x
        ccx = (verts[i0, 0] + verts[i1, 0] + verts[i2, 0]) / 3.0
        ccy = (verts[i0, 1] + verts[i1, 1] + verts[i2, 1]) / 3.0
        ccz = (verts[i0, 2] + verts[i1, 2] + verts[i2, 2]) / 3.0
        side = nx * (cam[0] - ccx) + ny * (cam[1] - ccy) + nz * (cam[2] - ccz)
        if side < 0.0:
            nx, ny, nz = -nx, -ny, -nz
        s = nx * (px - bx) + ny * (py - by) + nz * (pz - bz)
        d = np.sqrt(best_d2)
        out_err[i] = d if s >= 0.0 else -d
        out_cp[i, 0], out_cp[i, 1], out_cp[i, 2] = bx, by, bz
        out_fp[i, 0], out_fp[i, 1], out_fp[i, 2] = i0, i1, i2
        out_ok[i] = 1


def shape_precision(mean: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Shifted absolute error: |mean - across-pixel mean of means| over the
    analyzed (valid) region. Zero outside it."""
    out = np.zeros_like(mean)
    if valid.any():
        out[valid] = np.abs(mean[valid] - mean[valid].mean())
    return out


def aggregate(seq: FrameSequence, transforms, mesh: TriangleMesh,
              index: VertexIndex3, exact_face: bool = False,
              threads: int = 1) -> MetricFields:
    """Temporal aggregation of per-frame signed errors.

    `transforms` is one camera-to-organ transform per frame (a single
    transform is broadcast). A pixel is retained when it is valid in at
    least 50% of the frames (and at least 2, so the sample SD exists).
    The shifted-AE field is computed over the retained pixels; callers
    that mask the field afterwards should recompute it on the masked
    region with shape_precision().
    """
    n = len(seq.frames)
    if n < 2:
        raise ValueError("aggregation needs at least 2 frames")
    if isinstance(transforms, RigidTransform):
        transforms = [transforms] * n
    if len(transforms) != n:
        raise ValueError("need one transform per frame")

    h, w = seq.height, seq.width
    count = np.zeros((h, w), np.int32)
    mean = np.zeros((h, w), np.float64)
    m2 = np.zeros((h, w), np.float64)

    def one(args):
        frame, t_co = args
        return signed_error_frame(frame, t_co, mesh, index,
                                  exact_face=exact_face)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as ex:
            fields = ex.map(one, zip(seq.frames, transforms))
            for field in fields:
                _welford_update(field, count, mean, m2)
    else:
        for frame, t_co in zip(seq.frames, transforms):
            _welford_update(one((frame, t_co)), count, mean, m2)

    retained = (2 * count >= n) & (count >= MIN_SD_SUPPORT)
    if not retained.any():
        raise ValueError("empty field: no pixel valid in enough frames")
    sd = np.zeros((h, w), np.float64)
    sd[retained] = np.sqrt(m2[retained] / (count[retained] - 1))
    mean_out = np.where(retained, mean, 0.0)
    return MetricFields(w, h, retained, mean_out, sd,
                        shape_precision(mean_out, retained), count)


def _welford_update(field: ErrorField, count, mean, m2):
    v = field.valid
    count[v] += 1
    delta = field.error[v] - mean[v]
    mean[v] += delta / count[v]
    m2[v] += delta * (field.error[v] - mean[v])


def temporal_mean_cloud(seq: FrameSequence) -> OrganizedCloud:
    """Per-pixel mean of valid points across frames (>= 50% validity rule).

    Used to pick pins on a noise-reduced cloud before registration.
    """
    n = len(seq.frames)
    h, w = seq.height, seq.width
    count = np.zeros((h, w), np.int64)
    acc = np.zeros((h, w, 3), np.float64)
    cacc = np.zeros((h, w, 3), np.float64)
    for frame in seq.frames:
        v = frame.valid
        count[v] += 1
        acc[v] += frame.points[v]
        cacc[v] += frame.colors[v]
    retained = 2 * count >= n
    retained &= count > 0
    safe = np.maximum(count, 1)[:, :, None]
    pts = acc / safe
    cols = np.clip(np.rint(cacc / safe), 0, 255).astype(np.uint8)
    pts[~retained] = 0
    cols[~retained] = 0
    ts = float(np.mean([f.timestamp for f in seq.frames]))
    return OrganizedCloud(w, h, pts, cols, retained, ts)


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

def write_metrics_csv(fields: MetricFields, path) -> None:
    """Flat CSV of the retained pixels: px,py,mean,sd,shifted_ae."""
    path = Path(path)
    rows = ["px,py,mean,sd,shifted_ae"]
    ys, xs = np.nonzero(fields.valid)
    for y, x in zip(ys, xs):
        rows.append(f"{x},{y},{float(fields.mean[y, x])!r},"
                    f"{float(fields.sd[y, x])!r},"
                    f"{float(fields.shifted_ae[y, x])!r}")
    path.write_text("\n".join(rows) + "\n")


def write_heatmap_ppm(values: np.ndarray, valid: np.ndarray, path,
                      range_m: float = 0.01) -> None:
    """Binary P6 heatmap: diverging blue-white-red over [-range, +range]
    meters; invalid pixels black."""
    if range_m <= 0:
        raise ValueError("heatmap range must be positive")
    h, w = values.shape
    t = np.clip(values / range_m, -1.0, 1.0)
    img = np.zeros((h, w, 3), np.uint8)
    hot = t >= 0
    ramp_down = np.clip(np.rint(255 * (1.0 - np.abs(t))), 0, 255).astype(np.uint8)
    img[..., 0] = np.where(hot, 255, ramp_down)
    img[..., 1] = ramp_down
    img[..., 2] = np.where(hot, ramp_down, 255)
    img[~valid] = 0
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
