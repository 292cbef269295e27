"""Multipolygon rasterisation, coverage filtering and plot imputation.

Prediction polygons are merged per lattice cell by summing their values and
areas; sparsely covered cells are dropped; field plots are then inserted
into the resulting pseudo-target map, producing the ground-reference mask.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .raster import BandRaster, RasterGrid, atomic_write_text

log = logging.getLogger(__name__)

DEFAULT_COVERAGE = 0.40
VERTEX_TOLERANCE = 1e-6  # fraction of cell_size a vertex may stray outside its cell
AREA_RTOL = 1e-6

Point = tuple[float, float]


def shoelace_area(ring: Sequence[Point]) -> float:
    """Unsigned polygon area; the ring may or may not repeat its first vertex."""
    n = len(ring)
    if n < 3:
        return 0.0
    s = 0.0
    x0, y0 = ring[-1]
    for x1, y1 in ring:
        s += x0 * y1 - x1 * y0
        x0, y0 = x1, y1
    return abs(s) * 0.5


def clip_to_rect(ring: Sequence[Point], xmin: float, ymin: float, xmax: float, ymax: float) -> list[Point]:
    """Sutherland-Hodgman clipping of ``ring`` against an axis-aligned rectangle."""
    # each edge: (axis, bound, keep_greater)
    edges = ((0, xmin, True), (0, xmax, False), (1, ymin, True), (1, ymax, False))
    out = list(ring)
    for axis, bound, keep_greater in edges:
        if not out:
            break
        inp, out = out, []

        def inside(p):
            return p[axis] >= bound if keep_greater else p[axis] <= bound

        s = inp[-1]
        for e in inp:
            if inside(e):
                if not inside(s):
                    out.append(_cross(s, e, axis, bound))
                out.append(e)
            elif inside(s):
                out.append(_cross(s, e, axis, bound))
            s = e
    return out


def _cross(s: Point, e: Point, axis: int, bound: float) -> Point:
    t = (bound - s[axis]) / (e[axis] - s[axis])
    x = s[0] + t * (e[0] - s[0])
    y = s[1] + t * (e[1] - s[1])
    if axis == 0:
        return (bound, y)
    return (x, bound)


def _open_ring(ring: Sequence[Sequence[float]]) -> list[Point]:
    pts = [(float(p[0]), float(p[1])) for p in ring]
    if len(pts) > 1 and pts[0] == pts[-1]:
        pts = pts[:-1]
    return pts


@dataclass
class PolygonRecord:
    id: str
    ring: list[Point]
    value: float
    area: float | None = None

    def __post_init__(self):
        self.ring = _open_ring(self.ring)
        self.value = float(self.value)
        if self.area is None:
            self.area = shoelace_area(self.ring)
        else:
            self.area = float(self.area)


@dataclass
class PlotRecord:
    x: float
    y: float
    value: float
    id: str = ""

    def __post_init__(self):
        if not self.value >= 0:
            raise ValueError(f"plot value must be >= 0, got {self.value}")


@dataclass
class Diagnostic:
    id: str
    reason: str


@dataclass
class MergedCellTable:
    """Per-cell sums of polygon values and areas. ``count == 0`` means no entry."""

    value_sum: np.ndarray
    area_sum: np.ndarray
    count: np.ndarray
    rejected: list[Diagnostic] = field(default_factory=list)

    @classmethod
    def empty(cls, grid: RasterGrid) -> "MergedCellTable":
        return cls(np.zeros(grid.shape), np.zeros(grid.shape), np.zeros(grid.shape, dtype=np.int64))

    def stored(self) -> np.ndarray:
        return self.count > 0

    def copy(self) -> "MergedCellTable":
        return MergedCellTable(
            self.value_sum.copy(), self.area_sum.copy(), self.count.copy(), list(self.rejected)
        )


def assign_cell(record: PolygonRecord, grid: RasterGrid) -> tuple[tuple[int, int], float] | Diagnostic:
    """Find the single lattice cell holding ``record``; return ((row, col), area).

    Vertices may stray up to ``VERTEX_TOLERANCE * cell_size`` outside the cell;
    such polygons are clipped to the cell before a missing area is computed.
    """
    ring = record.ring
    if len(set(ring)) < 3:
        return Diagnostic(record.id, "degenerate ring (<3 distinct vertices)")
    ring_area = shoelace_area(ring)
    if ring_area <= 0.0:
        return Diagnostic(record.id, "degenerate ring (zero area)")
    if not math.isfinite(record.value):
        return Diagnostic(record.id, "non-finite value")

    xs = [p[0] for p in ring]
    ys = [p[1] for p in ring]
    cell = grid.locate(0.5 * (min(xs) + max(xs)), 0.5 * (min(ys) + max(ys)))
    if cell is None:
        return Diagnostic(record.id, "polygon outside grid")
    xmin, ymin, xmax, ymax = grid.cell_bounds(*cell)
    tol = VERTEX_TOLERANCE * grid.cell_size
    if min(xs) < xmin - tol or max(xs) > xmax + tol or min(ys) < ymin - tol or max(ys) > ymax + tol:
        return Diagnostic(record.id, "polygon spans more than one grid cell")

    area = record.area
    if abs(area - ring_area) > AREA_RTOL * ring_area:
        return Diagnostic(record.id, f"area {area} disagrees with ring area {ring_area}")
    if min(xs) < xmin or max(xs) > xmax or min(ys) < ymin or max(ys) > ymax:
        clipped = clip_to_rect(ring, xmin, ymin, xmax, ymax)
        area = min(area, shoelace_area(clipped))
    return cell, area


def merge_multipolygons(records: Iterable[PolygonRecord], grid: RasterGrid) -> MergedCellTable:
    """Sum values and areas of all polygons falling in each lattice cell."""
    table = MergedCellTable.empty(grid)
    for rec in records:
        res = assign_cell(rec, grid)
        if isinstance(res, Diagnostic):
            table.rejected.append(res)
            continue
        (r, c), area = res
        table.value_sum[r, c] += rec.value
        table.area_sum[r, c] += area
        table.count[r, c] += 1
    if table.rejected:
        log.warning("rejected %d polygon record(s)", len(table.rejected))
    over = table.area_sum > grid.cell_area * (1 + AREA_RTOL)
    if over.any():
        log.warning("%d cell(s) have merged area above the cell area (overlapping input?)", int(over.sum()))
    return table


def density_normalize(table: MergedCellTable, grid: RasterGrid) -> np.ndarray:
    """Rescale merged values to a full cell: ``V * cell_area / A`` (NaN where empty)."""
    out = np.full(grid.shape, np.nan)
    ok = table.stored() & (table.area_sum > 0)
    out[ok] = table.value_sum[ok] * grid.cell_area / table.area_sum[ok]
    return out


def filter_table(table: MergedCellTable, grid: RasterGrid, threshold: float = DEFAULT_COVERAGE) -> MergedCellTable:
    """Drop cells whose covered fraction is strictly below ``threshold``."""
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    out = table.copy()
    drop = out.stored() & (out.area_sum / grid.cell_area < threshold)
    out.value_sum[drop] = 0.0
    out.area_sum[drop] = 0.0
    out.count[drop] = 0
    return out


def coverage_filter(
    table: MergedCellTable,
    grid: RasterGrid,
    threshold: float = DEFAULT_COVERAGE,
    density: bool = False,
) -> tuple[BandRaster, BandRaster]:
    """Rasterise a merged table into (target, pseudo-target mask)."""
    kept = filter_table(table, grid, threshold)
    mask = kept.stored()
    target = np.full(grid.shape, np.nan)
    if density:
        target[mask] = density_normalize(kept, grid)[mask]
    else:
        target[mask] = kept.value_sum[mask]
    return (
        BandRaster(grid, target[None], ["target"]),
        BandRaster(grid, mask.astype(np.float64)[None], ["m_pt"]),
    )


@dataclass
class ImputedTargetSet:
    grid: RasterGrid
    target: np.ndarray
    m_pt: np.ndarray
    m_gr: np.ndarray
    merged_plots: int = 0
    skipped: list[Diagnostic] = field(default_factory=list)

    BAND_NAMES = ("target", "m_pt", "m_gr")

    @classmethod
    def from_pseudo(cls, target: BandRaster, m_pt: BandRaster) -> "ImputedTargetSet":
        t = np.asarray(target.data[0], dtype=np.float64).copy()
        m = np.asarray(m_pt.data[0], dtype=np.float64).copy()
        return cls(target.grid, t, m, np.zeros_like(m))

    def to_raster(self) -> BandRaster:
        return BandRaster(self.grid, np.stack([self.target, self.m_pt, self.m_gr]), list(self.BAND_NAMES))

    @classmethod
    def from_raster(cls, raster: BandRaster) -> "ImputedTargetSet":
        names = list(raster.band_names)
        if names[:3] != list(cls.BAND_NAMES):
            raise ValueError(f"expected bands {cls.BAND_NAMES}, got {names}")
        d = raster.data.astype(np.float64)
        return cls(raster.grid, d[0].copy(), d[1].copy(), d[2].copy())

    def copy(self) -> "ImputedTargetSet":
        return ImputedTargetSet(
            self.grid, self.target.copy(), self.m_pt.copy(), self.m_gr.copy(),
            self.merged_plots, list(self.skipped),
        )


def impute_true_targets(target_set: ImputedTargetSet, plots: Iterable[PlotRecord]) -> ImputedTargetSet:
    """Insert field-plot values into the target map.

    Each plot replaces its cell's value and marks the cell in both masks.
    Plots sharing a cell are averaged; ``merged_plots`` counts the extras.
    """
    out = target_set.copy()
    grid = out.grid
    by_cell: dict[tuple[int, int], list[float]] = defaultdict(list)
    for i, plot in enumerate(plots):
        cell = grid.locate(plot.x, plot.y)
        if cell is None:
            out.skipped.append(Diagnostic(plot.id or str(i), f"plot ({plot.x}, {plot.y}) outside grid"))
            continue
        by_cell[cell].append(float(plot.value))
    for (r, c), values in by_cell.items():
        out.target[r, c] = math.fsum(values) / len(values)
        out.m_gr[r, c] = 1.0
        out.m_pt[r, c] = 1.0
        out.merged_plots += len(values) - 1
    if out.skipped:
        log.warning("skipped %d plot(s) outside the grid", len(out.skipped))
    if out.merged_plots:
        log.warning("%d plot(s) shared a cell with another plot and were averaged", out.merged_plots)
    return out


# -- file formats -----------------------------------------------------------

def read_polygons(path: str | os.PathLike) -> list[PolygonRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                records.append(PolygonRecord(str(obj["id"]), obj["ring"], obj["value"], obj.get("area")))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as err:
                raise ValueError(f"{path}:{lineno}: bad polygon record ({err})") from None
    return records


def write_polygons(records: Iterable[PolygonRecord], path: str | os.PathLike) -> None:
    lines = []
    for r in records:
        obj = {"id": r.id, "ring": [list(p) for p in r.ring] + [list(r.ring[0])], "value": r.value}
        if r.area is not None:
            obj["area"] = r.area
        lines.append(json.dumps(obj))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_plots(path: str | os.PathLike) -> list[PlotRecord]:
    plots = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"x", "y", "value"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
        for i, row in enumerate(reader):
            try:
                plots.append(PlotRecord(float(row["x"]), float(row["y"]), float(row["value"]), row.get("id") or str(i)))
            except ValueError as err:
                raise ValueError(f"{path}:{i + 2}: {err}") from None
    return plots


def write_plots(plots: Iterable[PlotRecord], path: str | os.PathLike) -> None:
    rows = ["x,y,value"]
    rows += [f"{p.x!r},{p.y!r},{p.value!r}" for p in plots]
    atomic_write_text(Path(path), "\n".join(rows) + "\n")
