import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pseudoreg.raster import RasterGrid
from pseudoreg.sarfeat import (
    SINGLE_SCENE_BANDS, TEMPORAL_BANDS, IntensityStack, from_decibel, ndi, scene_features, temporal_stats,
    to_decibel,
)

GRID = RasterGrid(0.0, 40.0, 10.0, 4, 4)


def test_decibel_values():
    assert to_decibel(1.0) == 0.0
    assert to_decibel(0.1) == pytest.approx(-10.0, abs=1e-12)
    assert np.isnan(to_decibel(0.0))
    with pytest.raises(ValueError):
        to_decibel(-1e-3)


def test_decibel_round_trip(rng):
    x = rng.uniform(1e-4, 10, size=(50, 50))
    assert np.allclose(from_decibel(to_decibel(x)), x, rtol=1e-6, atol=0)


@given(st.floats(1e-6, 1e3), st.floats(1e-6, 1e3))
def test_decibel_monotone(a, b):
    if a < b:
        assert to_decibel(a) < to_decibel(b)


def test_ndi_examples():
    assert ndi(2.0, 2.0) == 0.0
    assert ndi(3.0, 1.0) == 0.5
    assert np.isnan(ndi(0.0, 0.0))


@given(st.floats(0, 1e3), st.floats(0, 1e3))
def test_ndi_bounded_and_antisymmetric(vv, vh):
    a, b = ndi(vv, vh), ndi(vh, vv)
    if vv + vh > 0:
        assert -1 <= a <= 1
        assert a == -b


def test_single_scene_stats_collapse(rng):
    s = rng.uniform(0.01, 0.2, size=(1, 2, 4, 4))
    f = temporal_stats(IntensityStack(GRID, s))
    db = to_decibel(s[0])
    for pol, k in (("vv", 0), ("vh", 1)):
        for stat in ("mean", "min", "max", "median"):
            assert np.allclose(f.band(f"{stat}_{pol}"), db[k], rtol=0, atol=1e-12)


def test_order_statistics_example():
    vv_db = np.array([-8.0, -10.0, -12.0])
    s = np.ones((3, 2, 4, 4))
    s[:, 0] = from_decibel(vv_db)[:, None, None]
    f = temporal_stats(IntensityStack(GRID, s))
    assert f.band("mean_vv")[0, 0] == pytest.approx(-10.0)
    assert f.band("min_vv")[0, 0] == pytest.approx(-12.0)
    assert f.band("max_vv")[0, 0] == pytest.approx(-8.0)
    assert f.band("median_vv")[0, 0] == pytest.approx(-10.0)


def test_temporal_stats_brute_force(rng):
    s = rng.uniform(0.005, 0.3, size=(5, 2, 4, 4))
    f = temporal_stats(IntensityStack(GRID, s))
    assert f.band_names == TEMPORAL_BANDS
    for r in range(4):
        for c in range(4):
            vv = [10 * math.log10(s[t, 0, r, c]) for t in range(5)]
            vh = [10 * math.log10(s[t, 1, r, c]) for t in range(5)]
            mvv = sum(s[t, 0, r, c] for t in range(5)) / 5
            mvh = sum(s[t, 1, r, c] for t in range(5)) / 5
            expect = [(mvv - mvh) / (mvv + mvh), sum(vv) / 5, sum(vh) / 5, min(vv), min(vh), max(vv), max(vh),
                      sorted(vv)[2], sorted(vh)[2]]
            assert f.data[:, r, c] == pytest.approx(expect, rel=1e-12, abs=1e-12)
    assert np.all(f.band("min_vv") <= f.band("median_vv")) and np.all(f.band("median_vv") <= f.band("max_vv"))


def test_even_median_is_midpoint():
    s = np.ones((4, 2, 4, 4))
    s[:, 0] = from_decibel(np.array([-1.0, -2.0, -3.0, -4.0]))[:, None, None]
    f = temporal_stats(IntensityStack(GRID, s))
    assert f.band("median_vv")[0, 0] == pytest.approx(-2.5)


def test_scene_features(rng):
    s = rng.uniform(0.01, 0.2, size=(2, 2, 4, 4))
    f = scene_features(IntensityStack(GRID, s), 1)
    assert f.band_names == SINGLE_SCENE_BANDS
    assert np.allclose(f.band("vv"), 10 * np.log10(s[1, 0]))
    assert np.allclose(f.band("ndi"), (s[1, 0] - s[1, 1]) / (s[1, 0] + s[1, 1]))


def test_stack_validation():
    with pytest.raises(ValueError):
        IntensityStack(GRID, np.ones((2, 3, 4, 4)))
    with pytest.raises(ValueError):
        IntensityStack(GRID, -np.ones((1, 2, 4, 4)))
    with pytest.raises(ValueError):
        temporal_stats(IntensityStack(GRID, np.ones((0, 2, 4, 4))))


def test_raster_round_trip():
    s = np.arange(2 * 2 * 16, dtype=float).reshape(2, 2, 4, 4) + 1
    st_ = IntensityStack(GRID, s)
    back = IntensityStack.from_raster(st_.to_raster())
    assert np.array_equal(back.scenes, s)
    assert st_.to_raster().band_names == ["vv_0", "vh_0", "vv_1", "vh_1"]
