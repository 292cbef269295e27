"""SAR predictor features: decibel conversion, NDI and temporal statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import BandRaster, RasterGrid

TEMPORAL_BANDS = [
    "ndi", "mean_vv", "mean_vh", "min_vv", "min_vh", "max_vv", "max_vh", "median_vv", "median_vh",
]
SINGLE_SCENE_BANDS = ["vv", "vh", "ndi"]


def to_decibel(linear) -> np.ndarray:
    """10*log10 of linear intensity. Zeros become NaN; negatives raise."""
    x = np.asarray(linear, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("negative intensity cannot be converted to dB")
    out = np.full(x.shape, np.nan)
    pos = x > 0
    out[pos] = 10.0 * np.log10(x[pos])
    return out


def from_decibel(db) -> np.ndarray:
    return np.power(10.0, np.asarray(db, dtype=np.float64) / 10.0)


def ndi(vv, vh) -> np.ndarray:
    """(vv - vh) / (vv + vh); NaN where the denominator is not positive."""
    vv = np.asarray(vv, dtype=np.float64)
    vh = np.asarray(vh, dtype=np.float64)
    den = vv + vh
    out = np.full(den.shape, np.nan)
    ok = den > 0
    out[ok] = (vv[ok] - vh[ok]) / den[ok]
    return out


@dataclass
class IntensityStack:
    """Co-registered dual-pol scenes, array shaped (time, 2, H, W) with band order VV, VH."""

    grid: RasterGrid
    scenes: np.ndarray
    scale: str = "linear"

    def __post_init__(self):
        s = np.asarray(self.scenes, dtype=np.float64)
        if s.ndim != 4 or s.shape[1] != 2:
            raise ValueError(f"scenes must be shaped (T, 2, H, W), got {s.shape}")
        if s.shape[2:] != self.grid.shape:
            raise ValueError("scene dims do not match the grid")
        if self.scale not in ("linear", "decibel"):
            raise ValueError(f"unknown scale {self.scale!r}")
        if self.scale == "linear" and np.any(s < 0):
            raise ValueError("linear intensities must be >= 0")
        self.scenes = s

    def decibel(self) -> np.ndarray:
        return to_decibel(self.scenes) if self.scale == "linear" else self.scenes

    def linear(self) -> np.ndarray:
        return self.scenes if self.scale == "linear" else from_decibel(self.scenes)

    def to_raster(self) -> BandRaster:
        t = self.scenes.shape[0]
        names = [f"{pol}_{i}" for i in range(t) for pol in ("vv", "vh")]
        return BandRaster(self.grid, self.scenes.reshape(2 * t, *self.grid.shape), names)

    @classmethod
    def from_raster(cls, raster: BandRaster, scale: str = "linear") -> "IntensityStack":
        if raster.band_count % 2:
            raise ValueError("intensity raster needs an even band count (VV, VH per scene)")
        t = raster.band_count // 2
        return cls(raster.grid, raster.data.reshape(t, 2, *raster.grid.shape), scale)


def temporal_stats(stack: IntensityStack) -> BandRaster:
    """Nine-band temporal feature raster (band order in ``TEMPORAL_BANDS``).

    Order statistics and means are taken on dB values; NDI uses the
    temporal-mean linear intensities so it stays within [-1, 1].
    """
    if stack.scenes.shape[0] == 0:
        raise ValueError("empty intensity stack")
    db = stack.decibel()
    lin_mean = stack.linear().mean(axis=0)
    bands = [
        ndi(lin_mean[0], lin_mean[1]),
        db[:, 0].mean(axis=0), db[:, 1].mean(axis=0),
        db[:, 0].min(axis=0), db[:, 1].min(axis=0),
        db[:, 0].max(axis=0), db[:, 1].max(axis=0),
        np.median(db[:, 0], axis=0), np.median(db[:, 1], axis=0),
    ]
    return BandRaster(stack.grid, np.stack(bands), list(TEMPORAL_BANDS))


def scene_features(stack: IntensityStack, index: int = 0) -> BandRaster:
    """Three-band single-scene features: VV dB, VH dB, NDI."""
    lin = stack.linear()[index]
    db = stack.decibel()[index]
    return BandRaster(stack.grid, np.stack([db[0], db[1], ndi(lin[0], lin[1])]), list(SINGLE_SCENE_BANDS))
