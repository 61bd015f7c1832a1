"""View-field masking, content masking, and 6x5 spatial pooling.

Masks are plain (H, W) boolean arrays. Both masks vote over each pixel's
3-vertex footprint: a pixel is kept when at least 2 of its footprint
vertices satisfy the criterion (seen by the other camera / labeled
inlier).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errorfield import ErrorField, MetricFields
from .meshio import LABEL_INLIER, TriangleMesh

DEFAULT_COLS = 6
DEFAULT_ROWS = 5
DEFAULT_OUTLIER_THRESHOLD = 0.95
FOOTPRINT_VOTES = 2


@dataclass
class Footprint:
    """Mesh vertex ids touched by a camera's closest-point lookups."""

    ids: np.ndarray          # sorted unique int64
    vertex_count: int

    def __post_init__(self):
        self.ids = np.unique(np.asarray(self.ids, np.int64))
        if len(self.ids) and (self.ids[0] < 0 or
                              self.ids[-1] >= self.vertex_count):
            raise ValueError("footprint vertex id out of range")

    def member_mask(self) -> np.ndarray:
        m = np.zeros(self.vertex_count, bool)
        m[self.ids] = True
        return m


def footprint_of(field: ErrorField, vertex_count: int) -> Footprint:
    """Union of the 3-vertex footprints of all valid pixels."""
    ids = field.footprint[field.valid].ravel()
    return Footprint(ids[ids >= 0], vertex_count)


def _footprint_votes(field: ErrorField, vertex_ok: np.ndarray) -> np.ndarray:
    votes = np.zeros((field.height, field.width), np.int64)
    fp = field.footprint[field.valid]
    if fp.size and fp.max() >= len(vertex_ok):
        raise ValueError("footprint refers to a different mesh "
                         f"(vertex id {int(fp.max())} out of range)")
    votes[field.valid] = vertex_ok[fp].sum(axis=1)
    return field.valid & (votes >= FOOTPRINT_VOTES)


def viewfield_mask(field: ErrorField, other: Footprint) -> np.ndarray:
    """Pixels of `field` whose surface footprint is also seen by the other
    camera (>= 2 of 3 footprint vertices in `other`)."""
    return _footprint_votes(field, other.member_mask())


def content_mask(field: ErrorField, mesh: TriangleMesh) -> np.ndarray:
    """Pixels looking at desired content (>= 2 of 3 footprint vertices
    labeled inlier)."""
    return _footprint_votes(field, mesh.labels == LABEL_INLIER)


@dataclass
class TileGrid:
    """6x5 pooled values for one metric. A tile's value is absent (NaN)
    when its outlier fraction exceeds the threshold."""

    rows: int
    cols: int
    value: np.ndarray         # (rows, cols) float64, NaN = absent
    support: np.ndarray       # (rows, cols) int64 kept pixels
    outlier_frac: np.ndarray  # (rows, cols) float64

    def present(self) -> np.ndarray:
        return ~np.isnan(self.value)

    def tile_id(self, r: int, c: int) -> int:
        return r * self.cols + c + 1


def tile_edges(n: int, parts: int) -> np.ndarray:
    """Floor-width tile boundaries; the last tile absorbs the remainder."""
    w = n // parts
    if w == 0:
        raise ValueError(f"cannot split {n} pixels into {parts} tiles")
    edges = np.arange(parts + 1, dtype=np.int64) * w
    edges[-1] = n
    return edges


def pool(fields: MetricFields, mask: np.ndarray,
         rows: int = DEFAULT_ROWS, cols: int = DEFAULT_COLS,
         outlier_threshold: float = DEFAULT_OUTLIER_THRESHOLD,
         ) -> dict[str, TileGrid]:
    """Average each metric over a rows x cols tile grid.

    A pixel counts as kept when it is retained in `fields` AND true in
    `mask`. The outlier fraction is compared against the threshold as an
    exact rational, so a tile at exactly 95.0% outlier content keeps its
    value and one more outlier pixel drops it.
    """
    if mask.shape != (fields.height, fields.width):
        raise ValueError("mask dimensions do not match the field")
    if not 0.0 < outlier_threshold <= 1.0:
        raise ValueError("outlier threshold must be in (0, 1]")
    thr = Fraction(str(outlier_threshold))
    redges = tile_edges(fields.height, rows)
    cedges = tile_edges(fields.width, cols)
    kept = fields.valid & mask
    grids = {m: TileGrid(rows, cols,
                         np.full((rows, cols), np.nan),
                         np.zeros((rows, cols), np.int64),
                         np.zeros((rows, cols), np.float64))
             for m in MetricFields.METRICS}
    for r in range(rows):
        for c in range(cols):
            block = np.s_[redges[r]:redges[r + 1], cedges[c]:cedges[c + 1]]
            kb = kept[block]
            total = kb.size
            nkept = int(kb.sum())
            frac = Fraction(total - nkept, total)
            for m, grid in grids.items():
                grid.support[r, c] = nkept
                grid.outlier_frac[r, c] = float(frac)
                if nkept > 0 and frac <= thr:
                    grid.value[r, c] = np.mean(
                        fields.metric(m)[block][kb])
    return grids


def write_tiles_csv(grids: dict[str, TileGrid], path) -> None:
    """Tile CSV: tile_id,metric,value,support,outlier_frac (value empty
    for absent tiles)."""
    path = Path(path)
    rows = ["tile_id,metric,value,support,outlier_frac"]
    for m in MetricFields.METRICS:
        grid = grids[m]
        for r in range(grid.rows):
            for c in range(grid.cols):
                v = grid.value[r, c]
                sval = "" if np.isnan(v) else repr(float(v))
                rows.append(f"{grid.tile_id(r, c)},{m},{sval},"
                            f"{grid.support[r, c]},"
                            f"{float(grid.outlier_frac[r, c])!r}")
    path.write_text("\n".join(rows) + "\n")


def write_footprint(fp: Footprint, path) -> None:
    path = Path(path)
    lines = [f"vertices {fp.vertex_count}"]
    lines += [str(int(i)) for i in fp.ids]
    path.write_text("\n".join(lines) + "\n")


def read_footprint(path) -> Footprint:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("vertices "):
        raise ValueError(f"{path}: not a footprint file")
    count = int(lines[0].split()[1])
    ids = np.array([int(x) for x in lines[1:] if x.strip()], np.int64)
    return Footprint(ids, count)
