"""Synthetic forest-like scenes: a truth field, biased/noisy pseudo-target
polygons, exact field plots and speckled dual-pol intensity features.

Formulas (fully determined by the SynthSpec and its seed):

* truth: standardised ``gaussian_filter(N(0,1) field, smooth_sigma)`` mapped
  through the standard normal CDF onto ``[value_min, value_max]``.
* covered cells: the ``round(coverage * H * W)`` highest cells of a second
  smoothed field (``region_sigma``), ties broken by flat index.
* pseudo value per covered cell: ``max(0, truth + pseudo_bias + pseudo_noise * N(0,1))``,
  carried by one full-cell polygon or split vertically into two polygons
  whose values are proportional to their areas.
* features: VV = 0.05 + 0.10 * (1 - exp(-v/300)), VH = 0.01 + 0.04 * (1 - exp(-v/250)),
  each multiplied by Gamma(looks, 1/looks) speckle per scene.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import ndtr

from .geodata import PlotRecord, PolygonRecord, write_plots, write_polygons
from .raster import BandRaster, RasterGrid, atomic_write_text, save_raster
from .sarfeat import IntensityStack, temporal_stats

SLIVER_RATE = 0.05  # share of uncovered cells that get a sub-threshold sliver


@dataclass
class SynthSpec:
    seed: int = 0
    height: int = 256
    width: int = 256
    cell_size: float = 10.0
    value_min: float = 0.0
    value_max: float = 660.0
    smooth_sigma: float = 6.0
    region_sigma: float = 10.0
    coverage: float = 0.6
    pseudo_bias: float = 0.0
    pseudo_noise: float = 0.0
    n_plots: int = 50
    n_scenes: int = 4
    looks: float = 4.0
    slivers: bool = True

    def __post_init__(self):
        if self.height < 128 or self.width < 128:
            raise ValueError("scene dims must be >= 128")
        if not 0 < self.coverage <= 1:
            raise ValueError("coverage must lie in (0, 1]")
        if self.n_plots < 10:
            raise ValueError("plot count must be >= 10")
        if self.n_plots > self.height * self.width:
            raise ValueError("more plots than cells")
        if not self.value_max > self.value_min:
            raise ValueError("value_max must exceed value_min")
        if self.pseudo_noise < 0 or self.looks <= 0 or self.n_scenes < 1:
            raise ValueError("pseudo_noise >= 0, looks > 0 and n_scenes >= 1 required")

    @property
    def grid(self) -> RasterGrid:
        return RasterGrid(0.0, self.height * self.cell_size, self.cell_size, self.width, self.height)


@dataclass
class SynthScene:
    spec: SynthSpec
    truth: BandRaster
    covered: np.ndarray  # bool (H, W)
    pseudo: np.ndarray  # per-cell pseudo value, NaN outside coverage
    polygons: list[PolygonRecord]
    plots: list[PlotRecord]
    intensities: IntensityStack
    features: BandRaster = field(repr=False, default=None)


def smooth_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    z = gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    return (z - z.mean()) / z.std()


def truth_field(rng, spec: SynthSpec) -> np.ndarray:
    z = smooth_field(rng, (spec.height, spec.width), spec.smooth_sigma)
    v = spec.value_min + (spec.value_max - spec.value_min) * ndtr(z)
    # stored rasters are float32; keep truth exactly representable
    return v.astype(np.float32).astype(np.float64)


def coverage_mask(rng, spec: SynthSpec) -> np.ndarray:
    z = smooth_field(rng, (spec.height, spec.width), spec.region_sigma).ravel()
    k = int(round(spec.coverage * z.size))
    order = np.argsort(-z, kind="stable")
    mask = np.zeros(z.size, bool)
    mask[order[:k]] = True
    return mask.reshape(spec.height, spec.width)


def saturating_vv(v):
    return 0.05 + 0.10 * (1.0 - np.exp(-np.asarray(v) / 300.0))


def saturating_vh(v):
    return 0.01 + 0.04 * (1.0 - np.exp(-np.asarray(v) / 250.0))


def _rect(x0, y0, x1, y1):
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]


def _cell_polygons(rng, grid: RasterGrid, covered, pseudo) -> list[PolygonRecord]:
    polys = []
    rows, cols = np.nonzero(covered)
    splits = rng.random(rows.size) < 0.5
    fractions = rng.uniform(0.3, 0.7, rows.size)
    for r, c, split, f in zip(rows, cols, splits, fractions):
        xmin, ymin, xmax, ymax = grid.cell_bounds(int(r), int(c))
        v = float(pseudo[r, c])
        if not split:
            polys.append(PolygonRecord(f"c{r}_{c}", _rect(xmin, ymin, xmax, ymax), v))
            continue
        xm = xmin + f * (xmax - xmin)
        left = PolygonRecord(f"c{r}_{c}a", _rect(xmin, ymin, xm, ymax), 0.0)
        right = PolygonRecord(f"c{r}_{c}b", _rect(xm, ymin, xmax, ymax), 0.0)
        left.value = v * left.area / (left.area + right.area)
        right.value = v - left.value
        polys += [left, right]
    return polys


def _sliver_polygons(rng, grid: RasterGrid, covered, truth) -> list[PolygonRecord]:
    """Thin strips (10-35% of a cell) in uncovered cells; the coverage filter drops them."""
    free = np.argwhere(~covered)
    if free.size == 0:
        return []
    pick = free[rng.random(len(free)) < SLIVER_RATE]
    out = []
    for r, c in pick:
        xmin, ymin, xmax, ymax = grid.cell_bounds(int(r), int(c))
        f = rng.uniform(0.10, 0.35)
        out.append(PolygonRecord(f"s{r}_{c}", _rect(xmin, ymin, xmin + f * (xmax - xmin), ymax),
                                 float(truth[r, c]) * f))
    return out


def generate_scene(spec: SynthSpec) -> SynthScene:
    rng = np.random.default_rng(spec.seed)
    grid = spec.grid
    truth = truth_field(rng, spec)
    covered = coverage_mask(rng, spec)

    pseudo = np.full(truth.shape, np.nan)
    noise = rng.standard_normal(truth.shape)
    vals = truth + spec.pseudo_bias + spec.pseudo_noise * noise
    pseudo[covered] = np.maximum(0.0, vals[covered])

    polygons = _cell_polygons(rng, grid, covered, pseudo)
    if spec.slivers:
        polygons += _sliver_polygons(rng, grid, covered, truth)

    cells = rng.choice(spec.height * spec.width, size=spec.n_plots, replace=False)
    plots = []
    for k, idx in enumerate(sorted(int(i) for i in cells)):
        r, c = divmod(idx, spec.width)
        x, y = grid.cell_center(r, c)
        plots.append(PlotRecord(x, y, float(truth[r, c]), f"p{k}"))

    base = np.stack([saturating_vv(truth), saturating_vh(truth)])
    speckle = rng.gamma(spec.looks, 1.0 / spec.looks, size=(spec.n_scenes, 2) + truth.shape)
    # round through float32 so features match a re-derivation from the saved intensities
    stack = IntensityStack(grid, (base[None] * speckle).astype(np.float32))
    return SynthScene(spec, BandRaster(grid, truth[None], ["truth"]), covered, pseudo, polygons, plots,
                      stack, temporal_stats(stack))


def write_scene(scene: SynthScene, out: str | os.PathLike) -> dict[str, Path]:
    """Write truth, polygons, plots, intensity and feature rasters under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "truth": out / "truth",
        "polygons": out / "polygons.jsonl",
        "plots": out / "plots.csv",
        "intensity": out / "intensity",
        "features": out / "features",
        "spec": out / "spec.json",
    }
    save_raster(scene.truth, paths["truth"])
    write_polygons(scene.polygons, paths["polygons"])
    write_plots(scene.plots, paths["plots"])
    save_raster(scene.intensities.to_raster(), paths["intensity"])
    save_raster(scene.features, paths["features"])
    atomic_write_text(paths["spec"], json.dumps(asdict(scene.spec), indent=2, sort_keys=True) + "\n")
    return paths
