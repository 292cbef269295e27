"""Shared generators for tests."""

import math

import numpy as np

from pseudoreg.geodata import PolygonRecord
from pseudoreg.raster import RasterGrid


def star_polygon(rng, grid: RasterGrid, row: int, col: int, n: int = 6, pid: str = "p") -> PolygonRecord:
    """Random simple (star-shaped) polygon strictly inside cell (row, col)."""
    xmin, ymin, xmax, ymax = grid.cell_bounds(row, col)
    cx = xmin + grid.cell_size * rng.uniform(0.3, 0.7)
    cy = ymin + grid.cell_size * rng.uniform(0.3, 0.7)
    reach = min(cx - xmin, xmax - cx, cy - ymin, ymax - cy)
    angles = np.sort(rng.uniform(0, 2 * math.pi, n))
    radii = rng.uniform(0.2, 0.95, n) * reach
    ring = [(cx + r * math.cos(a), cy + r * math.sin(a)) for a, r in zip(angles, radii)]
    return PolygonRecord(pid, ring, float(rng.uniform(1, 500)))


def random_polygon_set(rng, grid: RasterGrid, count: int) -> list[PolygonRecord]:
    out = []
    for i in range(count):
        r, c = int(rng.integers(grid.height)), int(rng.integers(grid.width))
        out.append(star_polygon(rng, grid, r, c, int(rng.integers(3, 9)), f"p{i}"))
    return out


def shoelace_oracle(ring):
    """Trapezoid-rule area, independent of the cross-product formulation."""
    pts = list(ring) + [ring[0]]
    s = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        s += (x1 - x0) * (y1 + y0) / 2.0
    return abs(s)
