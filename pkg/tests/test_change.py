import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vhm import change as ch
from vhm.raster import Raster

from oracles import flood_fill_components


def fine(a):
    return Raster.from_array(np.asarray(a, np.float32), pixel_size=1)


def coarse(a):
    return Raster.from_array(np.asarray(a, np.float32), pixel_size=10)


def test_no_drop_no_objects():
    assert ch.change_objects(fine(np.full((20, 20), -9.99))) == []


def test_single_block_at_min_area():
    d = np.zeros((20, 20), np.float32)
    d[3:8, 4:9] = -15
    objs = ch.change_objects(fine(d))
    assert len(objs) == 1
    o = objs[0]
    assert (o.area, o.pixel_count, o.bbox) == (25.0, 25, (4, 3, 8, 7))


def test_diagonal_fixture_connectivity():
    d = np.zeros((12, 12), np.float32)
    d[0:4, 0:3] = -12
    d[4:8, 3:6] = -12    # touches the first block only at a corner
    assert ch.change_objects(fine(d)) == []
    assert ch.change_objects(fine(d), connectivity=4) == []
    eight = ch.change_objects(fine(d), min_area=1)
    four = ch.change_objects(fine(d), min_area=1, connectivity=4)
    assert [o.area for o in eight] == [24.0]
    assert [o.area for o in four] == [12.0, 12.0]


def test_wrong_pixel_size_rejected():
    with pytest.raises(ValueError):
        ch.change_objects(coarse(np.zeros((3, 3))))
    with pytest.raises(ValueError):
        ch.change_objects(fine(np.zeros((3, 3))), connectivity=6)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 24), st.integers(1, 24), st.sampled_from([4, 8]),
       st.floats(0.2, 0.7))
def test_objects_match_flood_fill(seed, h, w, conn, p):
    rng = np.random.default_rng(seed)
    d = np.where(rng.random((h, w)) < p, -11.0, 0.0).astype(np.float32)
    d[rng.random((h, w)) < 0.05] = -9999
    min_area = int(rng.integers(1, 6))
    got = ch.change_objects(fine(d), min_area=min_area, connectivity=conn)
    mask = (d < -10) & (d != -9999)
    want = [c for c in flood_fill_components(mask, conn) if len(c) >= min_area]
    assert [set(zip(o.rows.tolist(), o.cols.tolist())) for o in got] == want
    assert [o.id for o in got] == list(range(1, len(got) + 1))


def test_footprint_means():
    d1 = fine(np.zeros((20, 20)))
    obj = ch.ChangeObject(1, np.arange(2, 7), np.arange(2, 7), 5, 5.0, (2, 2, 6, 6))
    assert ch.object_mean_s2diff(obj, coarse([[-9.0, 0], [0, 0]]), d1) == -9
    rows = np.repeat(np.arange(4), 25)
    cols = np.concatenate([np.arange(25) % 10 + (0 if i < 3 else 10) for i in range(4)])
    two = ch.ChangeObject(1, rows, cols, 100, 100.0, (0, 0, 19, 3))
    assert ch.object_mean_s2diff(two, coarse([[-10.0, -2], [0, 0]]), d1) == -8
    assert ch.object_mean_s2diff(two, coarse([[-10.0, -9999], [0, 0]]), d1) == -10
    assert math.isnan(ch.object_mean_s2diff(two, coarse([[-9999.0, -9999], [0, 0]]), d1))


def test_misaligned_grids_rejected():
    obj = ch.ChangeObject(1, np.array([0]), np.array([0]), 1, 1.0, (0, 0, 0, 0))
    shifted = Raster.from_array(np.zeros((2, 2), np.float32), pixel_size=10, origin_x=5)
    with pytest.raises(ValueError):
        ch.object_mean_s2diff(obj, shifted, fine(np.zeros((20, 20))))
    with pytest.raises(ValueError):
        ch.object_mean_s2diff(obj, Raster.from_array(np.zeros((2, 2), np.float32), pixel_size=7.5),
                              fine(np.zeros((20, 20))))


def test_box_stats_quartiles():
    b = ch.box_stats([-12, -10, -8])
    assert (b.n, b.median, b.q1, b.q3) == (3, -10, -11, -9)
    assert (b.whisker_low, b.whisker_high, b.outlier_count) == (-12, -8, 0)
    out = ch.box_stats([0, 0, 0, 0, 50])
    assert out.outlier_count == 1 and out.whisker_high == 0
    empty = ch.box_stats([])
    assert empty.n == 0 and math.isnan(empty.median)


@settings(max_examples=100)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=60))
def test_box_stats_ordering(vals):
    b = ch.box_stats(vals)
    assert b.whisker_low <= b.q1 <= b.median <= b.q3 <= b.whisker_high
    assert b.median == pytest.approx(float(np.median(vals)))


def test_bucket_rows():
    objs = [ch.ChangeObject(i, np.array([0]), np.array([0]), 300, 300.0, (0, 0, 0, 0), v)
            for i, v in enumerate([-12.0, -10.0, -8.0])]
    rows = ch.bucket_stats(objs)
    assert [r.label for r in rows] == ["25-250", "250-1000", "1000-5000", ">=5000"]
    assert [r.n for r in rows] == [0, 3, 0, 0]
    assert rows[1].median == -10


def test_unchanged_forest_on_zero_map():
    d10 = coarse(np.zeros((3, 3)))
    forest = coarse(np.ones((3, 3)))
    obj = ch.ChangeObject(1, np.array([0]), np.array([0]), 1, 1.0, (0, 0, 0, 0))
    b = ch.unchanged_forest_stats([obj], d10, fine(np.zeros((30, 30))), forest)
    assert (b.n, b.median, b.q3 - b.q1) == (8, 0, 0)


def test_f1_examples():
    ref = coarse([[1.0, 1, 1, 1, 0]])
    assert ch.change_mask_f1(coarse([[-20.0, -20, -20, -20, 0]]), ref).f1 == 1
    s = ch.change_mask_f1(coarse([[-20.0, -20, 0, 0, 0]]), ref)
    assert (s.precision, s.recall) == (1, 0.5) and s.f1 == pytest.approx(2 / 3)
    none = ch.change_mask_f1(coarse([[0.0] * 5]), ref)
    assert (none.precision, none.f1, none.precision_undefined) == (0, 0, True)
    with pytest.raises(ValueError):
        ch.change_mask_f1(coarse([[-20.0] * 5]), coarse([[0.0] * 5]))


def test_f1_restricted_to_forest():
    s = ch.change_mask_f1(coarse([[-20.0, -20, -20]]), coarse([[1.0, 1, 0]]), coarse([[1.0, 1, 0]]))
    assert s.f1 == 1


def test_csv_outputs(tmp_path):
    d = np.zeros((20, 20), np.float32)
    d[0:10, 0:10] = -15
    objs = ch.attach_means(ch.change_objects(fine(d)), coarse([[-12.0, 0], [0, 0]]), fine(d))
    ch.write_objects(objs, tmp_path / "o.csv")
    ch.write_box_stats(ch.bucket_stats(objs), tmp_path / "b.csv")
    o = (tmp_path / "o.csv").read_text().splitlines()
    assert o == [",".join(ch.OBJECT_HEADER), "1,100,100,-12,0,0,9,9"]
    b = (tmp_path / "b.csv").read_text().splitlines()
    assert b[0] == ",".join(ch.BOX_HEADER) and b[1] == "25-250,1,-12,-12,-12,-12,-12,0"
