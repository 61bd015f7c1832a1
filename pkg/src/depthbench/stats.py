"""Aligned Rank Transform ANOVA over pooled tile observations.

The design is a balanced 2x2x2 within-subject factorial: every tile is
observed under all eight combinations of three two-level factors. For
each target effect the responses are aligned (cell mean removed, the
effect's own estimate restored), ranked with mid-tie averages, and
tested with the within-subject F that uses the effect-by-tile
interaction as the error term: F = MS_effect / MS_(effect x tile) with
df = (1, n_tiles - 1). For a complete balanced design this F coincides
with the mixed-model (tile as random effect) test.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.special import betainc
from scipy.stats import rankdata

EFFECTS = ("A", "B", "C", "A:B", "A:C", "B:C", "A:B:C")
LONG_TABLE_HEADER = "tile,factorA,factorB,factorC,metric,value"


def effect_axes(effect: str) -> tuple[int, ...]:
    try:
        return tuple(sorted("ABC".index(part) for part in effect.split(":")))
    except ValueError:
        raise ValueError(f"unknown effect {effect!r}")


@dataclass
class LongTable:
    """Long-format records (tile, A, B, C, metric, value)."""

    tile: np.ndarray    # (R,) int64
    a: np.ndarray       # (R,) str
    b: np.ndarray
    c: np.ndarray
    metric: np.ndarray  # (R,) str
    value: np.ndarray   # (R,) float64

    def __post_init__(self):
        self.tile = np.asarray(self.tile, np.int64)
        self.a = np.asarray(self.a, dtype=str)
        self.b = np.asarray(self.b, dtype=str)
        self.c = np.asarray(self.c, dtype=str)
        self.metric = np.asarray(self.metric, dtype=str)
        self.value = np.asarray(self.value, np.float64)
        n = len(self.tile)
        for arr in (self.a, self.b, self.c, self.metric, self.value):
            if len(arr) != n:
                raise ValueError("column lengths differ")
        if not np.all(np.isfinite(self.value)):
            raise ValueError("long table has non-finite values")
        keys = self._keys()
        if len(set(keys)) != n:
            raise ValueError("duplicate (tile, A, B, C, metric) record")

    def _keys(self):
        return list(zip(self.tile.tolist(), self.a, self.b, self.c,
                        self.metric))

    def __len__(self) -> int:
        return len(self.tile)

    def subset(self, metric: str) -> "LongTable":
        m = self.metric == metric
        if not m.any():
            raise ValueError(f"no records for metric {metric!r}")
        return LongTable(self.tile[m], self.a[m], self.b[m], self.c[m],
                         self.metric[m], self.value[m])

    def metrics(self) -> list:
        return sorted(set(self.metric.tolist()))

    def with_values(self, values: np.ndarray) -> "LongTable":
        return LongTable(self.tile, self.a, self.b, self.c, self.metric,
                         values)

    @staticmethod
    def from_rows(rows) -> "LongTable":
        rows = list(rows)
        if not rows:
            raise ValueError("empty long table")
        cols = list(zip(*rows))
        return LongTable(np.array(cols[0], np.int64),
                         np.array(cols[1], str), np.array(cols[2], str),
                         np.array(cols[3], str), np.array(cols[4], str),
                         np.array(cols[5], np.float64))

    @staticmethod
    def from_csv(path, collapse: str = "error") -> "LongTable":
        """Read the long-table CSV. collapse="mean" averages duplicate
        (tile, A, B, C, metric) records (replicate runs, e.g. several
        viewing angles) instead of rejecting them."""
        path = Path(path)
        lines = path.read_text().splitlines()
        if not lines or lines[0].strip() != LONG_TABLE_HEADER:
            raise ValueError(f"{path}: expected header {LONG_TABLE_HEADER!r}")
        rows = []
        for ln, raw in enumerate(lines[1:], start=2):
            if not raw.strip():
                continue
            parts = raw.split(",")
            if len(parts) != 6:
                raise ValueError(f"{path}: line {ln}: expected 6 fields")
            rows.append((int(parts[0]), parts[1], parts[2], parts[3],
                         parts[4], float(parts[5])))
        if collapse == "mean":
            acc = {}
            for r in rows:
                acc.setdefault(r[:5], []).append(r[5])
            rows = [k + (float(np.mean(v)),) for k, v in acc.items()]
        elif collapse != "error":
            raise ValueError("collapse must be 'error' or 'mean'")
        return LongTable.from_rows(rows)

    def to_csv(self, path) -> None:
        path = Path(path)
        rows = [LONG_TABLE_HEADER]
        for i in range(len(self)):
            rows.append(f"{self.tile[i]},{self.a[i]},{self.b[i]},"
                        f"{self.c[i]},{self.metric[i]},{float(self.value[i])!r}")
        path.write_text("\n".join(rows) + "\n")


def append_long_rows(path, rows) -> None:
    """Append rows to a long-table CSV, creating it (with header) first."""
    path = Path(path)
    lines = []
    if not path.exists():
        lines.append(LONG_TABLE_HEADER)
    for tile, a, b, c, metric, value in rows:
        lines.append(f"{tile},{a},{b},{c},{metric},{float(value)!r}")
    with open(path, "a") as fh:
        fh.write("\n".join(lines) + "\n")


def complete_cases(table: LongTable) -> tuple[LongTable, list]:
    """Keep only tiles observed in all 8 factor cells (for every metric
    present). Returns the filtered table and the dropped tile ids."""
    la, lb, lc = (sorted(set(x.tolist())) for x in (table.a, table.b, table.c))
    metrics = table.metrics()
    n_cells = len(la) * len(lb) * len(lc) * len(metrics)
    seen = {}
    for i in range(len(table)):
        seen.setdefault(int(table.tile[i]), set()).add(
            (table.a[i], table.b[i], table.c[i], table.metric[i]))
    complete = {t for t, cells in seen.items() if len(cells) == n_cells}
    dropped = sorted(set(seen) - complete)
    if len(complete) < 2:
        raise ValueError(
            f"insufficient data: only {len(complete)} complete tiles")
    keep = np.isin(table.tile, sorted(complete))
    return (LongTable(table.tile[keep], table.a[keep], table.b[keep],
                      table.c[keep], table.metric[keep], table.value[keep]),
            dropped)


def _cube(table: LongTable):
    """Arrange a single-metric table as y[a, b, c, tile]; raises on
    unbalanced or non-two-level input."""
    if len(set(table.metric.tolist())) != 1:
        raise ValueError("table mixes metrics; filter first")
    levels = []
    for name, col in zip("ABC", (table.a, table.b, table.c)):
        lv = sorted(set(col.tolist()))
        if len(lv) != 2:
            raise ValueError(f"factor {name} must have exactly 2 levels, "
                             f"got {lv}")
        levels.append(lv)
    tiles = sorted(set(table.tile.tolist()))
    n = len(tiles)
    if len(table) != 8 * n:
        raise ValueError("unbalanced input: expected one record per "
                         "(tile, cell)")
    tidx = {t: i for i, t in enumerate(tiles)}
    y = np.full((2, 2, 2, n), np.nan)
    ia = np.searchsorted(levels[0], table.a)
    ib = np.searchsorted(levels[1], table.b)
    ic = np.searchsorted(levels[2], table.c)
    it = np.array([tidx[t] for t in table.tile.tolist()])
    y[ia, ib, ic, it] = table.value
    if np.isnan(y).any():
        raise ValueError("unbalanced input: missing (tile, cell) records")
    return y, (ia, ib, ic, it), np.array(tiles), levels


def _effect_estimate(means: np.ndarray, axes: tuple) -> np.ndarray:
    """Inclusion-exclusion estimate of an effect from an array of means:
    sum over subsets S of the effect axes of (-1)^(|E|-|S|) times the
    mean collapsed onto S (all other axes averaged out)."""
    est = np.zeros_like(means)
    all_axes = tuple(range(means.ndim))
    for k in range(len(axes) + 1):
        for sub in combinations(axes, k):
            other = tuple(ax for ax in all_axes if ax not in sub)
            m = means.mean(axis=other, keepdims=True)
            est = est + ((-1) ** (len(axes) - k)) * m
    return np.broadcast_to(est, means.shape)


def align(table: LongTable, effect: str) -> LongTable:
    """ART alignment for one effect: each response minus its full A x B x C
    cell mean, plus the estimated target effect (marginal means minus
    grand mean for main effects; inclusion-exclusion for interactions)."""
    axes = effect_axes(effect)
    y, (ia, ib, ic, it), _, _ = _cube(table)
    cell_mean = y.mean(axis=3)
    est = _effect_estimate(cell_mean, axes)
    aligned = table.value - cell_mean[ia, ib, ic] + est[ia, ib, ic]
    return table.with_values(aligned)


def rank_midtie(values) -> np.ndarray:
    """Ranks 1..N with ties sharing the average of their rank span."""
    values = np.asarray(values, np.float64)
    if values.size == 0:
        raise ValueError("cannot rank an empty array")
    return rankdata(values, method="average")


def rm_anova(table: LongTable, effect: str) -> tuple[float, int, int]:
    """Within-subject F for one effect of the balanced 2x2x2 design:
    F = MS_effect / MS_(effect x tile), df = (1, n_tiles - 1)."""
    axes = effect_axes(effect)
    y, _, tiles, _ = _cube(table)
    n = len(tiles)
    ss_eff = float(np.sum(
        np.broadcast_to(_effect_estimate(y, axes), y.shape) ** 2))
    ss_err = float(np.sum(
        np.broadcast_to(_effect_estimate(y, axes + (3,)), y.shape) ** 2))
    df1 = 1
    df2 = n - 1
    ms_eff = ss_eff / df1
    ms_err = ss_err / df2
    if ms_eff == 0.0:
        return 0.0, df1, df2
    if ms_err == 0.0:
        return float("inf"), df1, df2
    return ms_eff / ms_err, df1, df2


def f_cdf_upper(f_stat: float, df1: int, df2: int) -> float:
    """Upper tail of the F distribution: p = 1 - I_x(df1/2, df2/2) with
    x = df1 F / (df1 F + df2), evaluated as the complementary regularized
    incomplete beta for accuracy."""
    if df1 < 1 or df2 < 1:
        raise ValueError("degrees of freedom must be >= 1")
    if np.isnan(f_stat) or f_stat < 0:
        raise ValueError("F statistic must be non-negative")
    if np.isinf(f_stat):
        return 0.0
    x = df2 / (df2 + df1 * f_stat)
    return float(betainc(df2 / 2.0, df1 / 2.0, x))


@dataclass
class AnovaRow:
    effect: str
    f_stat: float
    df1: int
    df2: int
    p: float


@dataclass
class AnovaTable:
    rows: list
    dropped_tiles: list

    def row(self, effect: str) -> AnovaRow:
        for r in self.rows:
            if r.effect == effect:
                return r
        raise KeyError(effect)

    def to_csv(self, path) -> None:
        path = Path(path)
        lines = ["effect,F,df1,df2,p"]
        for r in self.rows:
            lines.append(f"{r.effect},{float(r.f_stat)!r},{r.df1},{r.df2},{float(r.p)!r}")
        path.write_text("\n".join(lines) + "\n")


def art_anova(table: LongTable, metric: str) -> AnovaTable:
    """The full procedure for one metric: complete cases, then per effect
    align -> rank -> within-subject F -> p."""
    sub = table.subset(metric)
    cc, dropped = complete_cases(sub)
    rows = []
    for effect in EFFECTS:
        aligned = align(cc, effect)
        ranked = aligned.with_values(rank_midtie(aligned.value))
        f_stat, df1, df2 = rm_anova(ranked, effect)
        rows.append(AnovaRow(effect, f_stat, df1, df2,
                             f_cdf_upper(f_stat, df1, df2)))
    return AnovaTable(rows, dropped)
