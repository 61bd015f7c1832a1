"""File formats and domain containers: PLY meshes, organized-cloud frame
sequences (OCF v1), pose logs, and pin correspondence files.

All lengths are meters. Readers validate invariants on load and report
malformed input with a line number (text formats) or byte offset (binary).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .geom import RigidTransform, quat_to_matrix, matrix_to_quat

LABEL_OUTLIER = 0
LABEL_INLIER = 1

DEGENERATE_AREA = 1e-12  # m^2, load-time face cleanup threshold


class FormatError(Exception):
    """Malformed input file. Carries the source location when known."""

    def __init__(self, msg: str, path=None, line: int | None = None,
                 offset: int | None = None):
        loc = ""
        if path is not None:
            loc += f"{path}: "
        if line is not None:
            loc += f"line {line}: "
        if offset is not None:
            loc += f"byte {offset}: "
        super().__init__(loc + msg)
        self.path = path
        self.line = line
        self.offset = offset


# ---------------------------------------------------------------------------
# Domain containers
# ---------------------------------------------------------------------------

@dataclass
class TriangleMesh:
    """Ground-truth surface: vertices, triangular faces, optional per-vertex
    color, inlier/outlier label, and small-integer material id."""

    vertices: np.ndarray              # (N, 3) float64
    faces: np.ndarray                 # (M, 3) int64
    colors: np.ndarray | None = None  # (N, 3) uint8
    labels: np.ndarray = None         # (N,) uint8, 1 = inlier
    materials: np.ndarray = None      # (N,) uint8

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        n = len(self.vertices)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must be (N, 3)")
        if self.faces.size and (self.faces.ndim != 2 or self.faces.shape[1] != 3):
            raise ValueError("faces must be (M, 3)")
        self.faces = self.faces.reshape(-1, 3)
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh has non-finite vertices")
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= n:
                raise ValueError("face index out of range")
            a, b, c = self.faces[:, 0], self.faces[:, 1], self.faces[:, 2]
            if np.any((a == b) | (b == c) | (a == c)):
                raise ValueError("face has repeated vertex indices")
        if self.colors is not None:
            self.colors = np.ascontiguousarray(self.colors, dtype=np.uint8)
            if self.colors.shape != (n, 3):
                raise ValueError("colors must be (N, 3)")
        if self.labels is None:
            self.labels = np.full(n, LABEL_INLIER, dtype=np.uint8)
        else:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
            if self.labels.shape != (n,):
                raise ValueError("labels must be (N,)")
        if self.materials is None:
            self.materials = np.zeros(n, dtype=np.uint8)
        else:
            self.materials = np.ascontiguousarray(self.materials, dtype=np.uint8)
            if self.materials.shape != (n,):
                raise ValueError("materials must be (N,)")

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        cr = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        return 0.5 * np.linalg.norm(cr, axis=1)


def _clean_faces(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Drop zero-area (within DEGENERATE_AREA) and index-repeating faces."""
    if faces.size == 0:
        return faces.reshape(0, 3)
    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    distinct = (a != b) & (b != c) & (a != c)
    cr = np.cross(vertices[b] - vertices[a], vertices[c] - vertices[a])
    area = 0.5 * np.linalg.norm(cr, axis=1)
    return faces[distinct & (area > DEGENERATE_AREA)]


@dataclass
class OrganizedCloud:
    """W x H grid of optional camera-frame points with color.

    A cell is fully present (valid) or absent; present points are finite
    with depth z > 0.
    """

    width: int
    height: int
    points: np.ndarray          # (H, W, 3) float64, camera frame
    colors: np.ndarray          # (H, W, 3) uint8
    valid: np.ndarray           # (H, W) bool
    timestamp: float = 0.0

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.uint8)
        self.valid = np.ascontiguousarray(self.valid, dtype=bool)
        shape = (self.height, self.width)
        if self.points.shape != shape + (3,) or self.colors.shape != shape + (3,) \
                or self.valid.shape != shape:
            raise ValueError("grid arrays do not match width/height")
        if self.valid.any():
            pts = self.points[self.valid]
            if not np.all(np.isfinite(pts)):
                raise ValueError("valid cell with non-finite point")
            if np.any(pts[:, 2] <= 0):
                raise ValueError("valid cell with non-positive depth")

    @staticmethod
    def empty(width: int, height: int, timestamp: float = 0.0) -> "OrganizedCloud":
        return OrganizedCloud(
            width, height,
            np.zeros((height, width, 3), np.float64),
            np.zeros((height, width, 3), np.uint8),
            np.zeros((height, width), bool),
            timestamp,
        )


@dataclass
class FrameSequence:
    """n static frames of one scene from one camera, plus condition labels."""

    frames: list
    camera_id: str = "cam"
    conditions: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.frames:
            raise ValueError("frame sequence must hold at least one frame")
        w, h = self.frames[0].width, self.frames[0].height
        for f in self.frames:
            if f.width != w or f.height != h:
                raise ValueError("frames have inhomogeneous dimensions")

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def height(self) -> int:
        return self.frames[0].height


class PoseLog:
    """Timestamped measurements of the arm-to-tray transform T_AT(t)."""

    def __init__(self, times, transforms):
        self.times = np.ascontiguousarray(times, dtype=np.float64)
        self.transforms = list(transforms)
        if self.times.ndim != 1 or len(self.times) != len(self.transforms):
            raise ValueError("times and transforms must align")
        if len(self.times) == 0:
            raise ValueError("empty pose log")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("pose log timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class CorrespondenceSet:
    """Paired pin observations: ground-truth frame vs camera frame."""

    pin_ids: np.ndarray       # (N,) int64, unique
    organ_points: np.ndarray  # (N, 3) float64
    camera_points: np.ndarray  # (N, 3) float64

    def __post_init__(self):
        self.pin_ids = np.ascontiguousarray(self.pin_ids, dtype=np.int64)
        self.organ_points = np.ascontiguousarray(self.organ_points, dtype=np.float64)
        self.camera_points = np.ascontiguousarray(self.camera_points, dtype=np.float64)
        n = len(self.pin_ids)
        if self.organ_points.shape != (n, 3) or self.camera_points.shape != (n, 3):
            raise ValueError("point arrays must be (N, 3)")
        if len(np.unique(self.pin_ids)) != n:
            raise ValueError("duplicate pin ids")
        if not (np.all(np.isfinite(self.organ_points))
                and np.all(np.isfinite(self.camera_points))):
            raise ValueError("correspondence points must be finite")

    def __len__(self) -> int:
        return len(self.pin_ids)


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _parse_ply_header(data: bytes, path):
    """Returns (fmt, elements, body_offset, header_lines).

    elements: list of (name, count, props); props: ('scalar', np_type, name)
    or ('list', count_type, item_type, name).
    """
    end = data.find(b"end_header")
    if end < 0:
        raise FormatError("missing end_header", path=path, line=1)
    nl = data.find(b"\n", end)
    if nl < 0:
        raise FormatError("missing newline after end_header", path=path,
                          offset=end)
    header = data[:nl].decode("ascii", errors="replace")
    lines = header.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError("not a PLY file (missing 'ply' magic)", path=path, line=1)
    fmt = None
    elements = []
    for ln, raw in enumerate(lines[1:], start=2):
        tok = raw.strip().split()
        if not tok or tok[0] == "comment" or tok[0] == "obj_info":
            continue
        if tok[0] == "format":
            if len(tok) != 3 or tok[1] not in ("ascii", "binary_little_endian"):
                raise FormatError(f"unsupported format {raw.strip()!r}",
                                  path=path, line=ln)
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise FormatError("malformed element line", path=path, line=ln)
            try:
                elements.append([tok[1], int(tok[2]), []])
            except ValueError:
                raise FormatError("bad element count", path=path, line=ln)
        elif tok[0] == "property":
            if not elements:
                raise FormatError("property before any element", path=path, line=ln)
            if tok[1] == "list":
                if len(tok) != 5 or tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise FormatError("malformed list property", path=path, line=ln)
                elements[-1][2].append(("list", _PLY_TYPES[tok[2]],
                                        _PLY_TYPES[tok[3]], tok[4]))
            else:
                if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                    raise FormatError(f"unknown property type {tok[1]!r}",
                                      path=path, line=ln)
                elements[-1][2].append(("scalar", _PLY_TYPES[tok[1]], tok[2]))
        elif tok[0] == "end_header":
            break
        else:
            raise FormatError(f"unrecognized header line {raw.strip()!r}",
                              path=path, line=ln)
    if fmt is None:
        raise FormatError("missing format line", path=path, line=1)
    return fmt, elements, nl + 1, len(lines)


def _is_float(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


def _vertex_arrays(names, columns, count, path):
    cols = dict(zip(names, columns))
    for axis in ("x", "y", "z"):
        if axis not in cols:
            raise FormatError(f"vertex element missing property {axis!r}", path=path)
    vertices = np.column_stack([cols["x"], cols["y"], cols["z"]]).astype(np.float64)
    colors = None
    if all(k in cols for k in ("red", "green", "blue")):
        colors = np.column_stack(
            [cols["red"], cols["green"], cols["blue"]]).astype(np.uint8)
    labels = cols["label"].astype(np.uint8) if "label" in cols else \
        np.full(count, LABEL_INLIER, np.uint8)
    materials = cols["material"].astype(np.uint8) if "material" in cols else \
        np.zeros(count, np.uint8)
    return vertices, colors, labels, materials


def read_ply(path) -> TriangleMesh:
    """Read an ascii or binary_little_endian PLY mesh.

    Vertex x/y/z may be float32 or float64; optional red/green/blue,
    `label` (uchar, 0 = outlier / 1 = inlier, default 1) and `material`
    (uchar, default 0). Faces must be triangles. Degenerate faces are
    dropped on load.
    """
    path = Path(path)
    data = path.read_bytes()
    fmt, elements, body, header_lines = _parse_ply_header(data, path)

    vertices = colors = labels = materials = None
    faces = np.zeros((0, 3), np.int64)
    if fmt == "ascii":
        text = data[body:].decode("ascii", errors="replace").splitlines()
        ln = header_lines  # 1-based line number of the last header line
        row = 0
        for name, count, props in elements:
            block = text[row:row + count]
            if len(block) < count:
                raise FormatError(f"element {name!r} truncated "
                                  f"({len(block)} of {count} rows)",
                                  path=path, line=ln + len(block) + 1)
            if name == "vertex":
                if any(p[0] == "list" for p in props):
                    raise FormatError("list property on vertex element not supported",
                                      path=path, line=ln)
                names = [p[2] for p in props]
                try:
                    arr = np.array([r.split() for r in block], dtype=np.float64)
                except ValueError:
                    bad = 0
                    for i, r in enumerate(block):
                        tok = r.split()
                        if len(tok) != len(names) or not all(
                                _is_float(x) for x in tok):
                            bad = i
                            break
                    raise FormatError("malformed vertex row", path=path,
                                      line=ln + bad + 1)
                if arr.size and arr.shape[1] != len(names):
                    raise FormatError("vertex row width mismatch", path=path,
                                      line=ln + 1)
                cols = [arr[:, i] if count else np.zeros(0) for i in range(len(names))]
                vertices, colors, labels, materials = _vertex_arrays(
                    names, cols, count, path)
            elif name == "face":
                fl = np.zeros((count, 3), np.int64)
                for i, r in enumerate(block):
                    tok = r.split()
                    if not tok:
                        raise FormatError("empty face row", path=path, line=ln + i + 1)
                    k = int(tok[0])
                    if k != 3:
                        raise FormatError(f"non-triangle face (length {k})",
                                          path=path, line=ln + i + 1)
                    if len(tok) < 4:
                        raise FormatError("face row truncated", path=path,
                                          line=ln + i + 1)
                    fl[i] = [int(tok[1]), int(tok[2]), int(tok[3])]
                faces = fl
            row += count
            ln += count
    else:
        pos = body
        for name, count, props in elements:
            if all(p[0] == "scalar" for p in props):
                dt = np.dtype([(p[2], "<" + p[1]) for p in props])
                need = dt.itemsize * count
                if pos + need > len(data):
                    raise FormatError(f"element {name!r} truncated",
                                      path=path, offset=len(data))
                rec = np.frombuffer(data, dtype=dt, count=count, offset=pos)
                pos += need
                if name == "vertex":
                    names = [p[2] for p in props]
                    cols = [rec[n] for n in names]
                    vertices, colors, labels, materials = _vertex_arrays(
                        names, cols, count, path)
            elif name == "face" and len(props) == 1 and props[0][0] == "list":
                _, ctype, itype, _ = props[0]
                csz = np.dtype(ctype).itemsize
                isz = np.dtype(itype).itemsize
                stride = csz + 3 * isz
                # fast path: assume every face is a triangle, verify after
                if pos + stride * count <= len(data):
                    dt = np.dtype([("n", "<" + ctype), ("v", "<" + itype, (3,))])
                    rec = np.frombuffer(data, dtype=dt, count=count, offset=pos)
                    if np.all(rec["n"] == 3):
                        faces = rec["v"].astype(np.int64)
                        pos += stride * count
                        continue
                # slow path: walk cells to locate the offending face
                for i in range(count):
                    if pos + csz > len(data):
                        raise FormatError("face element truncated",
                                          path=path, offset=pos)
                    k = int(np.frombuffer(data, "<" + ctype, 1, pos)[0])
                    if k != 3:
                        raise FormatError(f"non-triangle face (length {k})",
                                          path=path, offset=pos)
                    pos += csz
                    if pos + 3 * isz > len(data):
                        raise FormatError("face element truncated",
                                          path=path, offset=pos)
                    pos += 3 * isz
            else:
                raise FormatError(f"unsupported element {name!r} layout",
                                  path=path, offset=pos)

    if vertices is None:
        raise FormatError("missing vertex element", path=path, line=1)
    if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
        bad = int(np.argmax((faces < 0).any(axis=1) |
                            (faces >= len(vertices)).any(axis=1)))
        raise FormatError(f"face {bad}: vertex index out of range", path=path)
    faces = _clean_faces(vertices, faces)
    return TriangleMesh(vertices, faces, colors, labels, materials)


def write_ply(mesh: TriangleMesh, path, binary: bool = True) -> None:
    """Write a mesh as PLY. Label and material are always stored; color
    only when present. read_ply(write_ply(m)) reproduces m within float32
    precision, and a second write is byte-identical."""
    path = Path(path)
    n = len(mesh.vertices)
    header = ["ply",
              f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    if mesh.colors is not None:
        header += ["property uchar red", "property uchar green",
                   "property uchar blue"]
    header += ["property uchar label", "property uchar material",
               f"element face {len(mesh.faces)}",
               "property list uchar int vertex_indices",
               "end_header"]
    buf = io.BytesIO()
    buf.write(("\n".join(header) + "\n").encode("ascii"))
    v32 = mesh.vertices.astype(np.float32)
    if binary:
        fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
        if mesh.colors is not None:
            fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        fields += [("label", "u1"), ("material", "u1")]
        rec = np.zeros(n, dtype=np.dtype(fields))
        rec["x"], rec["y"], rec["z"] = v32[:, 0], v32[:, 1], v32[:, 2]
        if mesh.colors is not None:
            rec["red"], rec["green"], rec["blue"] = (mesh.colors[:, 0],
                                                     mesh.colors[:, 1],
                                                     mesh.colors[:, 2])
        rec["label"] = mesh.labels
        rec["material"] = mesh.materials
        buf.write(rec.tobytes())
        fdt = np.dtype([("n", "u1"), ("v", "<i4", (3,))])
        frec = np.zeros(len(mesh.faces), dtype=fdt)
        frec["n"] = 3
        frec["v"] = mesh.faces.astype(np.int32)
        buf.write(frec.tobytes())
    else:
        for i in range(n):
            parts = [repr(float(v32[i, 0])), repr(float(v32[i, 1])),
                     repr(float(v32[i, 2]))]
            if mesh.colors is not None:
                parts += [str(int(c)) for c in mesh.colors[i]]
            parts += [str(int(mesh.labels[i])), str(int(mesh.materials[i]))]
            buf.write((" ".join(parts) + "\n").encode("ascii"))
        for f in mesh.faces:
            buf.write(f"3 {f[0]} {f[1]} {f[2]}\n".encode("ascii"))
    path.write_bytes(buf.getvalue())


# ---------------------------------------------------------------------------
# OCF v1 (organized cloud frames)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _scan_ocf_cells(buf, pos, n_cells, valid, offs):
    """Walk one frame's cells. Returns (end_pos, status, err_pos);
    status 0 = ok, 1 = truncated, 2 = bad validity byte."""
    n = buf.shape[0]
    for i in range(n_cells):
        if pos >= n:
            return pos, 1, pos
        v = buf[pos]
        offs[i] = pos
        if v == 1:
            if pos + 16 > n:
                return pos, 1, n
            valid[i] = 1
            pos += 16
        elif v == 0:
            valid[i] = 0
            pos += 1
        else:
            return pos, 2, pos
    return pos, 0, 0


def read_frames(path) -> FrameSequence:
    """Read an OCF v1 file written by write_frames (bit-exact round trip)."""
    path = Path(path)
    data = path.read_bytes()
    nl = data.find(b"end_header\n")
    if nl < 0:
        raise FormatError("missing end_header", path=path, line=1)
    header = data[:nl].decode("ascii", errors="replace").splitlines()
    body = nl + len(b"end_header\n")
    if not header or header[0] != "OCF 1":
        raise FormatError("not an OCF v1 file", path=path, line=1)
    width = height = nframes = None
    camera = "cam"
    conditions = {}
    for ln, raw in enumerate(header[1:], start=2):
        tok = raw.split(" ", 2)
        key = tok[0]
        try:
            if key == "width":
                width = int(tok[1])
            elif key == "height":
                height = int(tok[1])
            elif key == "frames":
                nframes = int(tok[1])
            elif key == "camera":
                camera = raw[len("camera "):]
            elif key == "cond":
                if len(tok) != 3:
                    raise FormatError("malformed cond line", path=path, line=ln)
                conditions[tok[1]] = tok[2]
            else:
                raise FormatError(f"unrecognized header line {raw!r}",
                                  path=path, line=ln)
        except (IndexError, ValueError):
            raise FormatError(f"malformed header line {raw!r}", path=path, line=ln)
    if width is None or height is None or nframes is None:
        raise FormatError("header missing width/height/frames", path=path, line=1)
    if nframes < 1:
        raise FormatError("frame count must be >= 1", path=path, line=1)

    buf = np.frombuffer(data, dtype=np.uint8)
    pos = body
    n_cells = width * height
    frames = []
    for fi in range(nframes):
        if pos + 8 > len(data):
            raise FormatError(f"frame {fi}: truncated timestamp",
                              path=path, offset=pos)
        ts = float(np.frombuffer(data, "<f8", 1, pos)[0])
        pos += 8
        valid = np.zeros(n_cells, np.uint8)
        offs = np.zeros(n_cells, np.int64)
        pos, status, err = _scan_ocf_cells(buf, pos, n_cells, valid, offs)
        if status == 1:
            raise FormatError(f"frame {fi}: truncated payload",
                              path=path, offset=int(err))
        if status == 2:
            raise FormatError(f"frame {fi}: invalid validity byte",
                              path=path, offset=int(err))
        vmask = valid.astype(bool)
        points = np.zeros((n_cells, 3), np.float64)
        colors = np.zeros((n_cells, 3), np.uint8)
        if vmask.any():
            starts = offs[vmask]
            pidx = starts[:, None] + 1 + np.arange(12)
            points[vmask] = buf[pidx].copy().view("<f4").reshape(-1, 3).astype(np.float64)
            cidx = starts[:, None] + 13 + np.arange(3)
            colors[vmask] = buf[cidx]
        frames.append(OrganizedCloud(
            width, height,
            points.reshape(height, width, 3),
            colors.reshape(height, width, 3),
            vmask.reshape(height, width),
            ts,
        ))
    return FrameSequence(frames, camera_id=camera, conditions=conditions)


def write_frames(seq: FrameSequence, path) -> None:
    """Write an OCF v1 file: ascii header, then per frame an 8-byte
    little-endian float64 timestamp and W*H row-major cells of
    1 validity byte + (if valid) 3 float32 xyz + 3 RGB bytes."""
    path = Path(path)
    if "\n" in seq.camera_id:
        raise ValueError("camera id must not contain newlines")
    lines = ["OCF 1", f"width {seq.width}", f"height {seq.height}",
             f"frames {len(seq.frames)}", f"camera {seq.camera_id}"]
    for k in sorted(seq.conditions):
        if not k or any(ch.isspace() for ch in k):
            raise ValueError(f"condition key {k!r} must be a single token")
        v = str(seq.conditions[k])
        if "\n" in v:
            raise ValueError(f"condition {k!r}: value must not contain "
                             f"newlines")
        lines.append(f"cond {k} {v}")
    lines.append("end_header")
    out = io.BytesIO()
    out.write(("\n".join(lines) + "\n").encode("ascii"))
    for frame in seq.frames:
        out.write(np.array(frame.timestamp, dtype="<f8").tobytes())
        valid = frame.valid.reshape(-1)
        sizes = np.where(valid, 16, 1).astype(np.int64)
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        buf = np.zeros(int(sizes.sum()), np.uint8)
        buf[starts] = valid.astype(np.uint8)
        if valid.any():
            vs = starts[valid]
            pbytes = frame.points.reshape(-1, 3)[valid].astype("<f4") \
                .view(np.uint8).reshape(-1, 12)
            buf[vs[:, None] + 1 + np.arange(12)] = pbytes
            buf[vs[:, None] + 13 + np.arange(3)] = frame.colors.reshape(-1, 3)[valid]
        out.write(buf.tobytes())
    path.write_bytes(out.getvalue())


# ---------------------------------------------------------------------------
# CSV pose log and correspondences
# ---------------------------------------------------------------------------

POSE_LOG_HEADER = "t,tx,ty,tz,qx,qy,qz,qw"
CORRESPONDENCES_HEADER = "pin_id,ox,oy,oz,cx,cy,cz"

QUAT_NORM_TOL = 1e-3


def read_pose_log(path) -> PoseLog:
    """Read a tracker pose log CSV (header t,tx,ty,tz,qx,qy,qz,qw).

    Quaternions are (x, y, z, w); rows whose quaternion norm deviates from
    1 by more than 1e-3 are rejected, otherwise normalized on load.
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != POSE_LOG_HEADER:
        raise FormatError(f"expected header {POSE_LOG_HEADER!r}", path=path, line=1)
    times = []
    transforms = []
    for ln, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        parts = raw.split(",")
        if len(parts) != 8:
            raise FormatError(f"expected 8 fields, got {len(parts)}",
                              path=path, line=ln)
        try:
            vals = [float(x) for x in parts]
        except ValueError:
            raise FormatError("malformed numeric field", path=path, line=ln)
        if not all(np.isfinite(v) for v in vals):
            raise FormatError("non-finite field", path=path, line=ln)
        t, tx, ty, tz, qx, qy, qz, qw = vals
        q = np.array([qx, qy, qz, qw])
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > QUAT_NORM_TOL:
            raise FormatError(f"quaternion norm {norm:.6f} deviates from 1",
                              path=path, line=ln)
        if times and t <= times[-1]:
            raise FormatError("non-monotonic timestamp", path=path, line=ln)
        times.append(t)
        transforms.append(RigidTransform(quat_to_matrix(q / norm),
                                         np.array([tx, ty, tz])))
    if not times:
        raise FormatError("pose log has no samples", path=path, line=1)
    return PoseLog(np.array(times), transforms)


def write_pose_log(log: PoseLog, path) -> None:
    path = Path(path)
    rows = [POSE_LOG_HEADER]
    for t, tf in zip(log.times, log.transforms):
        q = matrix_to_quat(tf.rotation)
        tr = tf.translation
        rows.append(",".join(repr(float(v)) for v in
                             (t, tr[0], tr[1], tr[2], q[0], q[1], q[2], q[3])))
    path.write_text("\n".join(rows) + "\n")


def read_correspondences(path) -> CorrespondenceSet:
    """Read pin correspondences CSV (header pin_id,ox,oy,oz,cx,cy,cz)."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != CORRESPONDENCES_HEADER:
        raise FormatError(f"expected header {CORRESPONDENCES_HEADER!r}",
                          path=path, line=1)
    ids, opts, cpts = [], [], []
    seen = set()
    for ln, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        parts = raw.split(",")
        if len(parts) != 7:
            raise FormatError(f"expected 7 fields, got {len(parts)}",
                              path=path, line=ln)
        try:
            pid = int(parts[0])
            vals = [float(x) for x in parts[1:]]
        except ValueError:
            raise FormatError("malformed numeric field", path=path, line=ln)
        if not all(np.isfinite(v) for v in vals):
            raise FormatError("non-finite field", path=path, line=ln)
        if pid in seen:
            raise FormatError(f"duplicate pin id {pid}", path=path, line=ln)
        seen.add(pid)
        ids.append(pid)
        opts.append(vals[0:3])
        cpts.append(vals[3:6])
    return CorrespondenceSet(np.array(ids, np.int64),
                             np.array(opts, np.float64).reshape(-1, 3),
                             np.array(cpts, np.float64).reshape(-1, 3))


def write_correspondences(corr: CorrespondenceSet, path) -> None:
    path = Path(path)
    rows = [CORRESPONDENCES_HEADER]
    for i in range(len(corr)):
        o = corr.organ_points[i]
        c = corr.camera_points[i]
        rows.append(",".join([str(int(corr.pin_ids[i]))] +
                             [repr(float(v)) for v in (*o, *c)]))
    path.write_text("\n".join(rows) + "\n")
