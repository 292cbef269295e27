"""Wall-to-wall patch inference with p-norm blending, plus evaluation metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .dataset import CvSplit, patch_origins
from .geodata import PlotRecord, clip_to_rect, shoelace_area
from .raster import BandRaster

log = logging.getLogger(__name__)

FOOTPRINT_CHORDS = 64


@dataclass(frozen=True)
class BlendSpec:
    p: float = 5.0
    eps: float = 1e-6

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("blend exponent p must be >= 1")
        if not self.eps > 0:
            raise ValueError("ramp floor eps must be > 0")


def ramp(size: int) -> np.ndarray:
    """Linear ramp, 0 at both borders and 1 at the centre."""
    if size == 1:
        return np.ones(1)
    i = np.arange(size, dtype=np.float64)
    return 1.0 - np.abs(2.0 * i / (size - 1) - 1.0)


def blend_weights(size: int, blend: BlendSpec = BlendSpec()) -> np.ndarray:
    """Un-normalised per-pixel patch weight max(eps, rx*ry) ** p."""
    r = ramp(size)
    return np.maximum(blend.eps, np.outer(r, r)) ** blend.p


def window_origins(length: int, size: int = 64, stride: int = 32) -> list[int]:
    """Stride-spaced origins; a last window that would miss the edge is moved flush to it."""
    if length < size:
        raise ValueError(f"scene length {length} is smaller than the patch size {size}")
    origins = patch_origins(length, size, stride)
    if origins[-1] + size < length:
        if len(origins) > 1:
            origins[-1] = length - size
        else:
            origins.append(length - size)
    return origins


def windows(shape: Sequence[int], size: int = 64, stride: int = 32) -> list[tuple[int, int]]:
    rows = window_origins(shape[0], size, stride)
    cols = window_origins(shape[1], size, stride)
    return [(r, c) for r in rows for c in cols]


def weight_sum(shape: Sequence[int], origins: Iterable[tuple[int, int]], size: int,
               blend: BlendSpec = BlendSpec()) -> np.ndarray:
    w = blend_weights(size, blend)
    total = np.zeros(tuple(shape))
    for r, c in origins:
        total[r:r + size, c:c + size] += w
    return total


def mosaic(patches: Sequence[tuple[int, int, np.ndarray]], shape: Sequence[int],
           blend: BlendSpec = BlendSpec()) -> np.ndarray:
    """Blend square ``(row, col, values)`` patches into a float64 array.

    Weights are normalised per pixel before they multiply the values, so a
    pixel seen by a single patch gets that value unchanged. Pixels outside
    every patch are NaN.
    """
    if not patches:
        raise ValueError("no patches to mosaic")
    size = patches[0][2].shape[-1]
    w = blend_weights(size, blend)
    total = weight_sum(shape, [(r, c) for r, c, _ in patches], size, blend)
    out = np.zeros(tuple(shape))
    for r, c, values in patches:
        win = (slice(r, r + size), slice(c, c + size))
        out[win] += (w / total[win]) * np.asarray(values, dtype=np.float64).reshape(size, size)
    out[total == 0] = np.nan
    return out


def _as_predictor(model) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(model, torch.nn.Module):
        def run(x):
            model.eval()
            with torch.no_grad():
                return model(torch.from_numpy(x).float()).double().numpy()
        return run
    return model


def predict_scene(model, features: BandRaster, blend: BlendSpec = BlendSpec(), patch: int = 64,
                  stride: int = 32, batch_size: int = 16) -> BandRaster:
    """Run ``model`` over 50%-overlapping windows and blend into a one-band raster.

    ``model`` is a generator network or any callable mapping an (N, C, P, P)
    float32 array to (N, 1, P, P) predictions.
    """
    H, W = features.grid.shape
    if H < patch or W < patch:
        raise ValueError(f"scene {H}x{W} is smaller than the {patch}x{patch} patch")
    run = _as_predictor(model)
    data = np.asarray(features.data, dtype=np.float32)
    origins = windows((H, W), patch, stride)
    outputs = []
    for i in range(0, len(origins), batch_size):
        chunk = origins[i:i + batch_size]
        x = np.stack([data[:, r:r + patch, c:c + patch] for r, c in chunk])
        y = np.asarray(run(x), dtype=np.float64)
        outputs += [(r, c, y[k, 0]) for k, (r, c) in enumerate(chunk)]
    pred = mosaic(outputs, (H, W), blend)
    return BandRaster(features.grid, pred[None].astype(np.float32), ["prediction"])


# -- metrics ------------------------------------------------------------------

@dataclass
class MetricReport:
    rmse: float
    mae: float
    n: int
    cv_rmse_mean: float | None = None
    cv_rmse_std: float | None = None
    fold_rmse: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.rmse < 0 or self.mae < 0:
            raise ValueError("metrics must be non-negative")
        # power-mean inequality; the slack only absorbs rounding
        if self.rmse < self.mae * (1 - 1e-12):
            raise AssertionError(f"RMSE {self.rmse} < MAE {self.mae}")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None and v != []}


def _residual_metrics(residuals: np.ndarray) -> MetricReport:
    r = np.asarray(residuals, dtype=np.float64)
    if r.size == 0:
        raise ValueError("no samples to evaluate (empty mask)")
    a = np.abs(r)
    top = float(a.max())
    # scale before squaring so tiny or huge residuals neither underflow nor overflow
    rmse = top * math.sqrt(float(np.mean((a / top) ** 2))) if top > 0 else 0.0
    return MetricReport(rmse, float(np.mean(a)), int(r.size))


def rmse_mae(pred, target, mask=None) -> MetricReport:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    sel = np.ones(pred.shape, bool) if mask is None else np.asarray(mask) > 0
    return _residual_metrics((pred - target)[sel])


def cv_summary(fold_rmse: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation of per-fold RMSEs."""
    v = np.asarray(fold_rmse, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no fold results")
    return float(v.mean()), float(v.std(ddof=0))


def sample_at_plots(prediction: BandRaster, plots: Sequence[PlotRecord]) -> np.ndarray:
    band = prediction.data[0]
    out = np.empty(len(plots))
    for i, p in enumerate(plots):
        cell = prediction.grid.locate(p.x, p.y)
        if cell is None:
            raise ValueError(f"plot {p.id or i} at ({p.x}, {p.y}) is outside the raster")
        out[i] = band[cell]
    return out


def cv_evaluate(predictions: Sequence[BandRaster], plots: Sequence[PlotRecord], folds: CvSplit,
                footprint_radius: float | None = None) -> MetricReport:
    """Score fold ``i``'s prediction only on the plots held out in fold ``i``.

    rmse/mae pool all held-out plots; cv_rmse_* summarise per-fold RMSE.
    With ``footprint_radius`` plots are compared against the area-weighted
    footprint mean instead of the containing cell.
    """
    if len(predictions) != folds.k:
        raise ValueError(f"{len(predictions)} fold predictions for {folds.k} folds")
    residuals, fold_rmse = [], []
    for i, pred in enumerate(predictions):
        held = [plots[j] for j in folds.validation(i)]
        if footprint_radius is None:
            est = sample_at_plots(pred, held)
        else:
            est = footprint_means(pred, held, footprint_radius)
        r = est - np.array([p.value for p in held])
        fold_rmse.append(_residual_metrics(r).rmse)
        residuals.append(r)
    rep = _residual_metrics(np.concatenate(residuals))
    rep.cv_rmse_mean, rep.cv_rmse_std = cv_summary(fold_rmse)
    rep.fold_rmse = fold_rmse
    return rep


def footprint_ring(x: float, y: float, radius: float, chords: int = FOOTPRINT_CHORDS) -> list[tuple[float, float]]:
    """Regular polygon whose area equals the circle's (radius enlarged accordingly)."""
    scale = math.sqrt(2 * math.pi / (chords * math.sin(2 * math.pi / chords)))
    r = radius * scale
    return [(x + r * math.cos(2 * math.pi * k / chords), y + r * math.sin(2 * math.pi * k / chords))
            for k in range(chords)]


def footprint_weights(prediction: BandRaster, plot: PlotRecord, radius: float) -> dict[tuple[int, int], float]:
    """Intersection area of the plot footprint with each raster cell it touches."""
    grid = prediction.grid
    ring = footprint_ring(plot.x, plot.y, radius)
    cs = grid.cell_size
    col0 = max(0, math.floor((plot.x - radius * 1.01 - grid.origin_x) / cs))
    col1 = min(grid.width - 1, math.floor((plot.x + radius * 1.01 - grid.origin_x) / cs))
    row0 = max(0, math.floor((grid.origin_y - plot.y - radius * 1.01) / cs))
    row1 = min(grid.height - 1, math.floor((grid.origin_y - plot.y + radius * 1.01) / cs))
    weights = {}
    for r in range(row0, row1 + 1):
        for c in range(col0, col1 + 1):
            clipped = clip_to_rect(ring, *grid.cell_bounds(r, c))
            if len(clipped) >= 3:
                a = shoelace_area(clipped)
                if a > 0:
                    weights[(r, c)] = a
    return weights


def footprint_means(prediction: BandRaster, plots: Sequence[PlotRecord], radius: float) -> np.ndarray:
    if radius <= 0:
        raise ValueError("footprint radius must be > 0")
    band = prediction.data[0].astype(np.float64)
    out = np.empty(len(plots))
    for i, p in enumerate(plots):
        w = {k: a for k, a in footprint_weights(prediction, p, radius).items() if np.isfinite(band[k])}
        if not w:
            raise ValueError(f"footprint of plot {p.id or i} lies entirely outside the raster")
        total = sum(w.values())
        out[i] = sum(a * band[k] for k, a in w.items()) / total
    return out


def plot_level_eval(prediction: BandRaster, plots: Sequence[PlotRecord], footprint_radius: float) -> MetricReport:
    """RMSE/MAE of area-weighted footprint means against plot values."""
    est = footprint_means(prediction, plots, footprint_radius)
    return _residual_metrics(est - np.array([p.value for p in plots]))
