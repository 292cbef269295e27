"""Superpatch splitting, test selection, patch extraction and CV folds."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .raster import BandRaster, atomic_write_text

log = logging.getLogger(__name__)

PATCH_SIZE = 64
DIHEDRAL_TAGS = tuple(range(8))


@dataclass
class SceneStack:
    """Aligned predictor bands, imputed target and the two masks for one scene."""

    features: np.ndarray  # (C, H, W)
    target: np.ndarray  # (H, W), NaN where no target
    m_pt: np.ndarray
    m_gr: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        hw = self.features.shape[1:]
        for name in ("target", "m_pt", "m_gr"):
            arr = np.asarray(getattr(self, name), dtype=np.float32)
            if arr.shape != hw:
                raise ValueError(f"{name} shape {arr.shape} does not match features {hw}")
            setattr(self, name, arr)
        bad = (self.m_pt > 0) & ~np.isfinite(self.target)
        if bad.any():
            raise ValueError(f"{int(bad.sum())} masked pixel(s) have no finite target")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.features.shape[1], self.features.shape[2]

    @classmethod
    def from_rasters(cls, features: BandRaster, targets: BandRaster) -> "SceneStack":
        if features.grid.shape != targets.grid.shape:
            raise ValueError("feature and target rasters are on different grids")
        t = targets.data
        return cls(features.data, t[0], t[1], t[2])


@dataclass(frozen=True)
class Superpatch:
    x0: int  # column of the top-left pixel
    y0: int  # row of the top-left pixel
    w: int
    h: int
    role: str = "train-pool"

    def view(self, arr: np.ndarray) -> np.ndarray:
        return arr[..., self.y0:self.y0 + self.h, self.x0:self.x0 + self.w]


def split_superpatches(scene_dims: Sequence[int], superpatch_dims: Sequence[int]) -> list[Superpatch]:
    """Tile a (height, width) scene into non-overlapping blocks; partial blocks are dropped."""
    H, W = scene_dims
    h, w = superpatch_dims
    if h < 1 or w < 1:
        raise ValueError("superpatch dims must be positive")
    if h > H or w > W:
        raise ValueError(f"superpatch {h}x{w} larger than scene {H}x{W}")
    return [Superpatch(x0, y0, w, h) for y0 in range(0, H - h + 1, h) for x0 in range(0, W - w + 1, w)]


def superpatch_coverage(sp: Superpatch, m_pt: np.ndarray) -> float:
    return float(np.mean(sp.view(m_pt) > 0))


def select_test_superpatches(
    superpatches: Sequence[Superpatch],
    m_pt: np.ndarray,
    min_overlap: float = 0.10,
    test_fraction: float = 0.15,
    seed: int = 0,
) -> tuple[list[Superpatch], list[Superpatch]]:
    """Draw test superpatches among those with >= ``min_overlap`` pseudo-target cover.

    Blocks with no pseudo-target pixels are removed first. The draw size is
    ceil(test_fraction * remaining), capped at the candidate count.
    """
    cov = [superpatch_coverage(sp, m_pt) for sp in superpatches]
    remaining = [i for i, c in enumerate(cov) if c > 0]
    candidates = [i for i in remaining if cov[i] >= min_overlap]
    if not candidates:
        raise ValueError(f"no superpatch has >= {min_overlap:.0%} pseudo-target overlap")
    n_test = math.ceil(test_fraction * len(remaining) - 1e-9)
    if n_test > len(candidates):
        log.warning("only %d test candidates for %d requested test superpatches", len(candidates), n_test)
        n_test = len(candidates)
    rng = np.random.default_rng(seed)
    chosen = set(int(i) for i in rng.choice(candidates, size=n_test, replace=False))
    test = [replace(superpatches[i], role="test") for i in remaining if i in chosen]
    pool = [replace(superpatches[i], role="train-pool") for i in remaining if i not in chosen]
    return test, pool


def dihedral(arr: np.ndarray, tag: int) -> np.ndarray:
    """Apply dihedral element ``tag`` (0-3: rotations by k*90 deg, 4-7: same then mirrored)."""
    out = np.rot90(arr, k=tag % 4, axes=(-2, -1))
    if tag >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


@dataclass(frozen=True)
class PatchRef:
    """Pointer to a patch window in the scene; pixels are materialised on demand."""

    row: int
    col: int
    size: int = PATCH_SIZE
    tag: int = 0
    role: str = "train"
    fold: int = -1


@dataclass
class PatchSample:
    input: np.ndarray  # (C, size, size)
    target: np.ndarray  # (1, size, size), 0 where unmasked
    m_pt: np.ndarray
    m_gr: np.ndarray
    ref: PatchRef = field(default_factory=lambda: PatchRef(0, 0))

    @property
    def tag(self) -> int:
        return self.ref.tag


def patch_origins(length: int, size: int, stride: int) -> list[int]:
    return list(range(0, length - size + 1, stride))


def extract_patch_refs(
    stack: SceneStack,
    region: Superpatch | None = None,
    size: int = PATCH_SIZE,
    overlap: float = 0.0,
    augment: bool = False,
    role: str = "train",
    fold: int = -1,
) -> list[PatchRef]:
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    if region is None:
        region = Superpatch(0, 0, stack.shape[1], stack.shape[0])
    if region.h < size or region.w < size:
        raise ValueError(f"region {region.h}x{region.w} smaller than patch size {size}")
    stride = max(1, int(round(size * (1 - overlap))))
    tags = DIHEDRAL_TAGS if augment else (0,)
    refs = []
    for dy in patch_origins(region.h, size, stride):
        for dx in patch_origins(region.w, size, stride):
            r, c = region.y0 + dy, region.x0 + dx
            if not np.any(stack.m_pt[r:r + size, c:c + size] > 0):
                continue
            refs.extend(PatchRef(r, c, size, t, role, fold) for t in tags)
    return refs


def materialize(refs: Iterable[PatchRef], stack: SceneStack) -> list[PatchSample]:
    out = []
    for ref in refs:
        win = (slice(ref.row, ref.row + ref.size), slice(ref.col, ref.col + ref.size))
        m_pt = stack.m_pt[win][None]
        target = np.where(m_pt > 0, stack.target[win][None], 0.0).astype(np.float32)
        planes = [stack.features[(slice(None),) + win], target, m_pt, stack.m_gr[win][None]]
        planes = [dihedral(p, ref.tag) for p in planes]
        out.append(PatchSample(*planes, ref=ref))
    return out


def extract_patches(
    stack: SceneStack,
    region: Superpatch | None = None,
    size: int = PATCH_SIZE,
    overlap: float = 0.0,
    augment: bool = False,
) -> list[PatchSample]:
    """Cut ``size`` patches from ``region`` with the given fractional overlap.

    Patches without any pseudo-target pixel are discarded; with ``augment``
    every kept window yields its eight dihedral variants.
    """
    return materialize(extract_patch_refs(stack, region, size, overlap, augment), stack)


@dataclass
class CvSplit:
    folds: list[list[int]]

    @property
    def k(self) -> int:
        return len(self.folds)

    def validation(self, i: int) -> list[int]:
        return list(self.folds[i])

    def training(self, i: int) -> list[int]:
        return sorted(j for f, fold in enumerate(self.folds) if f != i for j in fold)

    def fold_of(self) -> dict[int, int]:
        return {j: f for f, fold in enumerate(self.folds) for j in fold}


def cv_folds(n_items: int | Sequence, k: int = 5, seed: int = 0) -> CvSplit:
    """Seeded random partition of ``range(n)`` into ``k`` folds of near-equal size."""
    n = n_items if isinstance(n_items, int) else len(n_items)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of items ({n})")
    perm = np.random.default_rng(seed).permutation(n)
    return CvSplit([sorted(int(i) for i in part) for part in np.array_split(perm, k)])


@dataclass
class DatasetPlan:
    superpatches: list[Superpatch]
    test: list[Superpatch]
    train_pool: list[Superpatch]
    refs: list[PatchRef]
    folds: CvSplit | None

    def by_role(self, role: str) -> list[PatchRef]:
        return [r for r in self.refs if r.role == role]


def build_dataset(
    stack: SceneStack,
    superpatch_dims: Sequence[int],
    seed: int = 0,
    augment: bool = True,
    size: int = PATCH_SIZE,
    k_folds: int = 5,
    min_overlap: float = 0.10,
    test_fraction: float = 0.15,
) -> DatasetPlan:
    """Full patch-set plan: test patches (no overlap) and training patches
    (50% overlap, optional augmentation); train-pool superpatches are
    assigned CV folds for hyperparameter search."""
    sps = split_superpatches(stack.shape, superpatch_dims)
    test, pool = select_test_superpatches(sps, stack.m_pt, min_overlap, test_fraction, seed)
    folds = cv_folds(len(pool), min(k_folds, len(pool)), seed) if pool and k_folds > 0 else None
    fold_of = folds.fold_of() if folds else {}
    refs: list[PatchRef] = []
    for sp in test:
        refs += extract_patch_refs(stack, sp, size, 0.0, False, role="test")
    for i, sp in enumerate(pool):
        refs += extract_patch_refs(stack, sp, size, 0.5, augment, role="train", fold=fold_of.get(i, -1))
    return DatasetPlan(sps, test, pool, refs, folds)


def write_manifest(path: str | os.PathLike, refs: Iterable[PatchRef], meta: dict) -> None:
    lines = [json.dumps({"type": "meta", **meta}, sort_keys=True)]
    lines += [json.dumps({"type": "patch", **asdict(r)}, sort_keys=True) for r in refs]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_manifest(path: str | os.PathLike) -> tuple[dict, list[PatchRef]]:
    meta: dict = {}
    refs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                kind = obj.pop("type")
            except (json.JSONDecodeError, KeyError) as err:
                raise ValueError(f"{path}:{lineno}: bad manifest record ({err})") from None
            if kind == "meta":
                meta = obj
            elif kind == "patch":
                refs.append(PatchRef(**obj))
            else:
                raise ValueError(f"{path}:{lineno}: unknown record type {kind!r}")
    return meta, refs
