"""Band raster container: a directory with ``header.json`` plus one raw
little-endian float32 file per band (row-major, top-left origin)."""

from __future__ import annotations

import json
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADER_NAME = "header.json"
_BAND_DTYPE = np.dtype("<f4")


class RasterFormatError(ValueError):
    """Malformed header or band files."""


@dataclass(frozen=True)
class RasterGrid:
    """Square-cell lattice. ``origin_x``/``origin_y`` is the top-left corner."""

    origin_x: float
    origin_y: float
    cell_size: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.cell_size > 0 and math.isfinite(self.cell_size)):
            raise ValueError(f"cell_size must be > 0, got {self.cell_size}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"grid dims must be >= 1, got {self.width}x{self.height}")

    @property
    def cell_area(self) -> float:
        return self.cell_size * self.cell_size

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def cell_bounds(self, row: int, col: int) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) of cell (row, col)."""
        xmin = self.origin_x + col * self.cell_size
        ymax = self.origin_y - row * self.cell_size
        return xmin, ymax - self.cell_size, xmin + self.cell_size, ymax

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        xmin, ymin, xmax, ymax = self.cell_bounds(row, col)
        return 0.5 * (xmin + xmax), 0.5 * (ymin + ymax)

    def locate(self, x: float, y: float) -> tuple[int, int] | None:
        """Cell containing point (x, y), or None when outside the extent."""
        col = math.floor((x - self.origin_x) / self.cell_size)
        row = math.floor((self.origin_y - y) / self.cell_size)
        if 0 <= row < self.height and 0 <= col < self.width:
            return row, col
        return None

    def window(self, row0: int, col0: int, height: int, width: int) -> "RasterGrid":
        return RasterGrid(
            self.origin_x + col0 * self.cell_size,
            self.origin_y - row0 * self.cell_size,
            self.cell_size,
            width,
            height,
        )


@dataclass
class BandRaster:
    grid: RasterGrid
    data: np.ndarray  # (bands, height, width); NaN is nodata
    band_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise ValueError(f"raster data must be 2-D or 3-D, got shape {data.shape}")
        if data.shape[1:] != self.grid.shape:
            raise ValueError(f"data shape {data.shape[1:]} does not match grid {self.grid.shape}")
        self.data = data
        if not self.band_names:
            self.band_names = [f"band_{i}" for i in range(data.shape[0])]
        if len(self.band_names) != data.shape[0]:
            raise ValueError("band_names length must equal band count")

    @property
    def band_count(self) -> int:
        return self.data.shape[0]

    def band(self, name_or_index) -> np.ndarray:
        if isinstance(name_or_index, str):
            return self.data[self.band_names.index(name_or_index)]
        return self.data[name_or_index]


def _band_file(i: int) -> str:
    return f"band_{i:03d}.f32"


def atomic_dir(path: str | os.PathLike):
    """Context manager yielding a temp directory that replaces ``path`` on success."""
    return _AtomicDir(Path(path))


class _AtomicDir:
    def __init__(self, target: Path):
        self.target = target

    def __enter__(self) -> Path:
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=self.target.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.target.exists():
            old = self.target.with_name(f".{self.target.name}.old")
            shutil.rmtree(old, ignore_errors=True)
            os.replace(self.target, old)
            os.replace(self.tmp, self.target)
            shutil.rmtree(old, ignore_errors=True)
        else:
            os.replace(self.tmp, self.target)
        return False


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_raster(raster: BandRaster, path: str | os.PathLike) -> None:
    g = raster.grid
    header = {
        "width": g.width,
        "height": g.height,
        "origin_x": g.origin_x,
        "origin_y": g.origin_y,
        "cell_size": g.cell_size,
        "band_count": raster.band_count,
        "band_names": list(raster.band_names),
        "nodata": "nan",
    }
    with atomic_dir(path) as tmp:
        (tmp / HEADER_NAME).write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
        for i in range(raster.band_count):
            band = np.ascontiguousarray(raster.data[i], dtype=_BAND_DTYPE)
            (tmp / _band_file(i)).write_bytes(band.tobytes(order="C"))


_REQUIRED = {
    "width": int,
    "height": int,
    "origin_x": (int, float),
    "origin_y": (int, float),
    "cell_size": (int, float),
    "band_count": int,
    "band_names": list,
    "nodata": str,
}


def load_raster(path: str | os.PathLike) -> BandRaster:
    path = Path(path)
    header_path = path / HEADER_NAME
    if not header_path.is_file():
        raise RasterFormatError(f"{path}: missing {HEADER_NAME}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as err:
        raise RasterFormatError(f"{header_path}: invalid JSON ({err})") from None
    if not isinstance(header, dict):
        raise RasterFormatError(f"{header_path}: header must be an object")
    for key, typ in _REQUIRED.items():
        if key not in header:
            raise RasterFormatError(f"{header_path}: missing field {key!r}")
        if not isinstance(header[key], typ) or isinstance(header[key], bool):
            raise RasterFormatError(f"{header_path}: field {key!r} has wrong type")
    if header["nodata"].lower() != "nan":
        raise RasterFormatError(f"{header_path}: only nodata='nan' is supported")
    n = header["band_count"]
    if n < 1 or len(header["band_names"]) != n:
        raise RasterFormatError(f"{header_path}: band_count/band_names disagree")
    try:
        grid = RasterGrid(
            float(header["origin_x"]),
            float(header["origin_y"]),
            float(header["cell_size"]),
            header["width"],
            header["height"],
        )
    except ValueError as err:
        raise RasterFormatError(f"{header_path}: {err}") from None

    expected = grid.width * grid.height * _BAND_DTYPE.itemsize
    bands = []
    for i in range(n):
        band_path = path / _band_file(i)
        if not band_path.is_file():
            raise RasterFormatError(f"{path}: missing band file {band_path.name}")
        raw = band_path.read_bytes()
        if len(raw) != expected:
            raise RasterFormatError(
                f"{band_path}: {len(raw)} bytes, header implies {expected} "
                f"({grid.width}x{grid.height}x4)"
            )
        bands.append(np.frombuffer(raw, dtype=_BAND_DTYPE).reshape(grid.shape))
    data = np.stack(bands).astype(np.float32)
    return BandRaster(grid, data, [str(b) for b in header["band_names"]])
