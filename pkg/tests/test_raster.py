import math
import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bilinear_point, pool_loop
from vhm.raster import (HEADER_SIZE, GridSpec, Raster, RasterFormatError, bilinear_resample, pool_resample,
                        raster_diff, read_raster, slope_aspect, stack, write_raster)

ND = -9999.0


def r_(a, **kw):
    return Raster.from_array(np.asarray(a, dtype=np.float32), **kw)


# -- container ----------------------------------------------------------------

def test_grid_rejects_degenerate_shapes():
    with pytest.raises(ValueError):
        GridSpec(0, 3, 1.0, 0, 0)
    with pytest.raises(ValueError):
        GridSpec(3, 3, 0.0, 0, 0)


def test_raster_rejects_non_finite_and_shape_mismatch():
    with pytest.raises(ValueError):
        r_([[1.0, np.nan]])
    with pytest.raises(ValueError):
        Raster(np.zeros((2, 3)), GridSpec(2, 2, 1.0, 0, 0))


def test_raster_is_immutable():
    r = r_([[1.0, 2.0]])
    with pytest.raises(ValueError):
        r.data[0, 0, 0] = 5


# -- pooling -------------------------------------------------------------------

def test_pool_block_mean_and_max():
    r = r_([[1, 2], [3, 4]])
    assert pool_resample(r, 2, "mean").data[0, 0, 0] == 2.5
    assert pool_resample(r, 2, "max").data[0, 0, 0] == 4


def test_pool_nodata_rule():
    r = r_([[5, ND, 7, ND], [ND, ND, ND, ND]])
    m = pool_resample(r, 2, "mean")
    assert m.data[0, 0, 0] == 5
    assert m.data[0, 0, 1] == 7
    allnd = pool_resample(r_([[ND, ND], [ND, ND]]), 2, "mean")
    assert not allnd.valid()[0, 0]


def test_pool_scales_grid():
    r = Raster(np.ones((20, 30)), GridSpec(30, 20, 1.0, 100.0, 500.0))
    out = pool_resample(r, 10, "max")
    assert out.grid == GridSpec(3, 2, 10.0, 100.0, 500.0)


def test_pool_rejects_bad_factor_and_multiband():
    r = r_(np.ones((4, 4)))
    for f in (0, -2, 1.5):
        with pytest.raises(ValueError):
            pool_resample(r, f)
    with pytest.raises(ValueError):
        pool_resample(r_(np.ones((2, 4, 4))), 2)


def test_pool_drops_partial_windows_with_warning():
    with pytest.warns(UserWarning):
        out = pool_resample(r_(np.arange(25).reshape(5, 5)), 2, "mean")
    assert (out.height, out.width) == (2, 2)
    assert out.data[0, 0, 0] == np.mean([0, 1, 5, 6])


@given(st.floats(-1e3, 1e3, allow_nan=False, width=32), st.integers(1, 5), st.sampled_from(["mean", "max"]))
def test_pool_constant_is_fixed_point(c, factor, mode):
    r = r_(np.full((factor * 3, factor * 2), c))
    out = pool_resample(r, factor, mode)
    assert np.all(out.data == np.float32(c))


def test_pool_matches_window_oracle_on_random_rasters():
    rng = np.random.default_rng(11)
    for _ in range(150):
        factor = int(rng.integers(1, 5))
        h, w = factor * int(rng.integers(1, 6)), factor * int(rng.integers(1, 6))
        vals = rng.normal(10, 5, (h, w)).astype(np.float32)
        valid = rng.random((h, w)) > rng.choice([0.0, 0.3, 0.9])
        r = Raster.from_masked(vals, valid, GridSpec(w, h, 1.0, 0, 0))
        for mode in ("mean", "max"):
            out = pool_resample(r, factor, mode)
            ref = pool_loop(vals, valid, factor, mode)
            ok = ~np.isnan(ref)
            assert np.array_equal(out.valid(), ok)
            if mode == "max":
                assert np.array_equal(out.data[0][ok], ref[ok].astype(np.float32))
            else:
                assert np.allclose(out.data[0][ok], ref[ok], rtol=1e-6, atol=0)


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1))
def test_max_pool_commutes_with_increasing_map(seed):
    rng = np.random.default_rng(seed)
    v = rng.uniform(-3, 3, (6, 6)).astype(np.float32)
    f = lambda a: np.exp(a.astype(np.float64) / 2).astype(np.float32)  # noqa: E731
    lhs = pool_resample(r_(f(v)), 3, "max").data[0]
    rhs = f(pool_resample(r_(v), 3, "max").data[0])
    assert np.array_equal(lhs, rhs)


# -- bilinear -------------------------------------------------------------------

def test_bilinear_center_of_2x2():
    src = r_([[0, 1], [2, 3]])
    tgt = GridSpec(1, 1, 2.0, 0.0, 0.0)
    # origin_y of the source is 0 with rows going south; target center sits at (1, -1)
    out = bilinear_resample(src, tgt)
    assert out.data[0, 0, 0] == pytest.approx(1.5)


def test_bilinear_reproduces_affine_plane():
    g = GridSpec(12, 10, 10.0, 1000.0, 5000.0)
    xs, ys = g.cell_centers()
    plane = 2 * xs[None, :] + 3 * ys[:, None]
    src = Raster(plane - 10000, g)  # keep values in float32 range with sub-unit precision
    tgt = GridSpec(37, 31, 3.0, 1005.0, 4995.0)
    out = bilinear_resample(src, tgt)
    tx, ty = tgt.cell_centers()
    expect = 2 * tx[None, :] + 3 * ty[:, None] - 10000
    ok = out.valid()
    assert ok.sum() > 0.8 * ok.size
    assert np.allclose(out.data[0][ok], expect[ok], atol=2e-2)


def test_bilinear_identity_and_nodata():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(8, 9)).astype(np.float32)
    valid = rng.random((8, 9)) > 0.2
    src = Raster.from_masked(v, valid, GridSpec(9, 8, 1.0, 0, 8))
    out = bilinear_resample(src, src.grid)
    assert np.array_equal(out.valid(), valid)
    assert np.array_equal(out.data[0][valid], v[valid])


def test_bilinear_outside_extent_is_nodata():
    src = r_(np.ones((4, 4)), origin_y=4.0)
    out = bilinear_resample(src, GridSpec(8, 8, 1.0, -2.0, 6.0))
    assert not out.valid()[0, 0] and out.valid()[4, 4]


def test_bilinear_matches_pointwise_oracle():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(7, 6)).astype(np.float32)
    src = Raster(z, GridSpec(6, 7, 2.0, 0.0, 14.0))
    tgt = GridSpec(5, 5, 2.3, 1.1, 12.9)
    out = bilinear_resample(src, tgt)
    xs, ys = tgt.cell_centers()
    for i, y in enumerate(ys):
        for j, x in enumerate(xs):
            fx, fy = x / 2.0 - 0.5, (14.0 - y) / 2.0 - 0.5
            if 0 <= fx <= 5 and 0 <= fy <= 6:
                assert out.data[0, i, j] == pytest.approx(bilinear_point(z.astype(np.float64), fy, fx), abs=1e-5)
            else:
                assert not out.valid()[i, j]


def test_bilinear_rejects_multiband():
    with pytest.raises(ValueError):
        bilinear_resample(r_(np.ones((2, 3, 3))), GridSpec(3, 3, 1.0, 0, 0))


# -- terrain ----------------------------------------------------------------------

def _plane(fn, n=9, d=2.0):
    g = GridSpec(n, n, d, 0.0, n * d)
    xs, ys = g.cell_centers()
    return Raster(fn(xs[None, :], ys[:, None]) + np.zeros((n, n)), g)


def test_flat_dtm():
    s, a = slope_aspect(r_(np.full((5, 5), 300.0)))
    inner = (slice(1, -1), slice(1, -1))
    assert np.all(s.data[0][inner] == 0)
    assert not a.valid().any()
    assert not s.valid()[0].any()


def test_plane_rising_east_faces_west():
    s, a = slope_aspect(_plane(lambda x, y: x * math.tan(math.radians(30))))
    v = s.valid()
    assert np.allclose(s.data[0][v], 30, atol=1e-3)
    assert np.allclose(a.data[0][a.valid()], 270, atol=1e-3)


def test_plane_falling_north_faces_north():
    s, a = slope_aspect(_plane(lambda x, y: -y * math.tan(math.radians(10))))
    assert np.allclose(s.data[0][s.valid()], 10, atol=1e-3)
    asp = a.data[0][a.valid()]
    assert np.all(np.minimum(asp, 360 - asp) < 1e-3)


def test_terrain_rejects_small_and_nodata_windows():
    with pytest.raises(ValueError):
        slope_aspect(r_(np.ones((2, 5))))
    z = np.arange(36, dtype=np.float32).reshape(6, 6)
    z[2, 2] = ND
    s, _ = slope_aspect(r_(z))
    assert not s.valid()[1:4, 1:4].any()
    assert s.valid()[4, 4]


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.floats(-500, 500), st.floats(0.2, 5))
def test_slope_shift_and_aspect_scale_invariance(seed, c, k):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 3, (7, 7))
    s0, a0 = slope_aspect(r_(z))
    s1, _ = slope_aspect(r_(z + c))
    _, a2 = slope_aspect(r_(z * k))
    v = s0.valid()
    assert np.allclose(s0.data[0][v], s1.data[0][v], atol=2e-3)
    av = a0.valid() & a2.valid()
    d = np.abs(a0.data[0][av] - a2.data[0][av])
    assert np.all(np.minimum(d, 360 - d) < 1e-2)


# -- algebra and I/O -----------------------------------------------------------------

def test_raster_diff_examples():
    assert raster_diff(r_([[12, 3]]), r_([[2, 8]])).data[0].tolist() == [[10, -5]]
    d = raster_diff(r_([[ND, 1]]), r_([[1, 1]]))
    assert d.valid().tolist() == [[False, True]] and d.data[0, 0, 1] == 0
    with pytest.raises(ValueError):
        raster_diff(r_([[1, 2]]), r_([[1, 2]], pixel_size=2.0))


@given(st.lists(st.floats(-100, 100, width=32), min_size=4, max_size=4))
def test_diff_with_itself_is_zero(vals):
    r = r_(np.array(vals).reshape(2, 2))
    assert np.all(raster_diff(r, r).data[0] == 0)


def test_stack_bands():
    s = stack([r_([[1, 2]]), r_([[3, 4]])])
    assert s.bands == 2 and s.data[1].tolist() == [[3, 4]]


def test_round_trip_and_size(tmp_path):
    r = Raster(np.array([[1.5, -2.0], [ND, 7.25]]), GridSpec(2, 2, 10.0, 2600000.5, 1200000.25))
    p = tmp_path / "a.rstr"
    write_raster(r, p)
    assert p.stat().st_size == HEADER_SIZE + 16 == 68
    back = read_raster(p)
    assert back == r and back.grid == r.grid and back.nodata == r.nodata


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_round_trip_random(tmp_path_factory, bands, h, w, seed):
    rng = np.random.default_rng(seed)
    r = Raster(rng.normal(size=(bands, h, w)), GridSpec(w, h, float(rng.uniform(0.5, 30)), 1.0, 2.0), -1.0)
    p = tmp_path_factory.mktemp("rt") / "r.rstr"
    write_raster(r, p)
    back = read_raster(p)
    assert back.data.tobytes() == r.data.tobytes() and back.grid == r.grid


def test_corrupted_files(tmp_path):
    r = r_([[1, 2], [3, 4]])
    p = tmp_path / "a.rstr"
    write_raster(r, p)
    blob = p.read_bytes()
    (tmp_path / "magic.rstr").write_bytes(b"RSTX" + blob[4:])
    with pytest.raises(RasterFormatError, match="bad magic"):
        read_raster(tmp_path / "magic.rstr")
    (tmp_path / "short.rstr").write_bytes(blob[:-3])
    with pytest.raises(RasterFormatError, match="truncated"):
        read_raster(tmp_path / "short.rstr")
    (tmp_path / "hdr.rstr").write_bytes(blob[:10])
    with pytest.raises(RasterFormatError, match="truncated"):
        read_raster(tmp_path / "hdr.rstr")
    bad_dtype = bytearray(blob)
    bad_dtype[6] = 3
    (tmp_path / "dt.rstr").write_bytes(bytes(bad_dtype))
    with pytest.raises(RasterFormatError, match="dtype"):
        read_raster(tmp_path / "dt.rstr")


def test_header_layout(tmp_path):
    r = Raster(np.zeros((3, 2, 5)), GridSpec(5, 2, 0.5, -1.0, 9.0), nodata=-1.0)
    p = tmp_path / "h.rstr"
    write_raster(r, p)
    magic, ver, dtype, _, w, h, b, _, ps, ox, oy, nd, _ = struct.unpack("<4sHBBIIHHdddff", p.read_bytes()[:52])
    assert (magic, ver, dtype, w, h, b, ps, ox, oy, nd) == (b"RSTR", 1, 0, 5, 2, 3, 0.5, -1.0, 9.0, -1.0)


def test_no_warning_for_divisible_pool():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        pool_resample(r_(np.ones((4, 4))), 2)
