"""Height-decrease objects, their footprint statistics, box-plot summaries and mask scoring."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .raster import Raster, require_aligned

THRESHOLD = -10.0
MIN_AREA = 25.0
DEFAULT_BUCKETS = ((25.0, 250.0), (250.0, 1000.0), (1000.0, 5000.0), (5000.0, math.inf))


@dataclass(frozen=True)
class ChangeObject:
    id: int
    rows: np.ndarray    # member cell rows on the 1 m grid
    cols: np.ndarray
    pixel_count: int
    area: float
    bbox: tuple[int, int, int, int]   # min_col, min_row, max_col, max_row (inclusive)
    mean_s2_diff: float = math.nan


def change_objects(diff_1m: Raster, threshold: float = THRESHOLD, min_area: float = MIN_AREA,
                   connectivity: int = 8) -> list[ChangeObject]:
    """Connected groups of cells whose height dropped by more than ``-threshold`` metres."""
    if diff_1m.grid.pixel_size != 1.0:
        raise ValueError(f"change objects need a 1 m grid, got pixel size {diff_1m.grid.pixel_size}")
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    cand = diff_1m.valid() & (diff_1m.data[0] < threshold)
    structure = np.ones((3, 3), bool) if connectivity == 8 else ndimage.generate_binary_structure(2, 1)
    labels, n = ndimage.label(cand, structure=structure)
    if n == 0:
        return []
    # scipy numbers components in raster-scan order of their first cell
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(1, n + 2))
    w = labels.shape[1]
    out = []
    for k in range(n):
        idx = order[bounds[k]:bounds[k + 1]]
        area = idx.size * diff_1m.grid.pixel_size ** 2
        if area < min_area:
            continue
        rows, cols = np.divmod(idx, w)
        out.append(ChangeObject(len(out) + 1, rows, cols, int(idx.size), float(area),
                                (int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max()))))
    return out


def _aggregation_factor(fine: Raster, coarse: Raster) -> int:
    f, c = fine.grid, coarse.grid
    ratio = c.pixel_size / f.pixel_size
    factor = int(round(ratio))
    if factor < 1 or abs(ratio - factor) > 1e-9 or f.origin_x != c.origin_x or f.origin_y != c.origin_y:
        raise ValueError("coarse grid must be an exact integer aggregation of the fine grid")
    return factor


def object_mean_s2diff(obj: ChangeObject, s2_diff: Raster, fine: Raster) -> float:
    """Mean of the coarse difference over the object, weighted by fine-cell counts; NaN when all nodata."""
    factor = _aggregation_factor(fine, s2_diff)
    r, c = obj.rows // factor, obj.cols // factor
    if r.max() >= s2_diff.height or c.max() >= s2_diff.width:
        raise ValueError(f"object {obj.id} extends outside the coarse raster")
    ok = s2_diff.valid()[r, c]
    if not ok.any():
        return math.nan
    return float(s2_diff.data[0][r[ok], c[ok]].astype(np.float64).mean())


def attach_means(objects: list[ChangeObject], s2_diff: Raster, fine: Raster) -> list[ChangeObject]:
    return [ChangeObject(o.id, o.rows, o.cols, o.pixel_count, o.area, o.bbox, object_mean_s2diff(o, s2_diff, fine))
            for o in objects]


@dataclass(frozen=True)
class BoxplotStats:
    label: str
    n: int
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    outlier_count: int


def _median(v: np.ndarray) -> float:
    m = v.size
    return float((v[(m - 1) // 2] + v[m // 2]) / 2)


def box_stats(values, label: str = "") -> BoxplotStats:
    """Tukey hinges: quartiles are medians of the lower and upper halves (middle value shared when odd)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    v = v[~np.isnan(v)]
    n = v.size
    if n == 0:
        return BoxplotStats(label, 0, *([math.nan] * 5), 0)
    half = (n + 1) // 2
    q1, q3 = _median(v[:half]), _median(v[n - half:])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    return BoxplotStats(label, n, _median(v), q1, q3, float(inside.min()), float(inside.max()),
                        int(n - inside.size))


def bucket_stats(objects: list[ChangeObject], buckets=DEFAULT_BUCKETS) -> list[BoxplotStats]:
    rows = []
    for lo, hi in buckets:
        vals = [o.mean_s2_diff for o in objects if lo <= o.area < hi]
        label = f"{lo:g}-{hi:g}" if math.isfinite(hi) else f">={lo:g}"
        rows.append(box_stats(vals, label))
    return rows


def unchanged_forest_stats(objects: list[ChangeObject], s2_diff: Raster, fine: Raster,
                           forest: Raster) -> BoxplotStats:
    """Box stats of coarse forest cells that no change object touches."""
    require_aligned(s2_diff, forest)
    factor = _aggregation_factor(fine, s2_diff)
    touched = np.zeros((s2_diff.height, s2_diff.width), dtype=bool)
    for o in objects:
        touched[o.rows // factor, o.cols // factor] = True
    sel = forest.valid() & (forest.data[0] != 0) & s2_diff.valid() & ~touched
    return box_stats(s2_diff.data[0][sel], "unchanged_forest")


@dataclass(frozen=True)
class F1Score:
    precision: float
    recall: float
    f1: float
    precision_undefined: bool = False


def change_mask_f1(s2_diff: Raster, reference: Raster, forest: Raster | None = None,
                   threshold: float = THRESHOLD) -> F1Score:
    if forest is None:
        require_aligned(s2_diff, reference)
        inside = np.ones((s2_diff.height, s2_diff.width), dtype=bool)
    else:
        require_aligned(s2_diff, reference, forest)
        inside = forest.valid() & (forest.data[0] != 0)
    pred = inside & s2_diff.valid() & (s2_diff.data[0] < threshold)
    ref = inside & reference.valid() & (reference.data[0] != 0)
    n_ref = int(ref.sum())
    if n_ref == 0:
        raise ValueError("reference mask is empty; recall is undefined")
    tp = int((pred & ref).sum())
    n_pred = int(pred.sum())
    recall = tp / n_ref
    if n_pred == 0:
        return F1Score(0.0, recall, 0.0, True)
    precision = tp / n_pred
    f1 = 2 * precision * recall / (precision + recall) if tp else 0.0
    return F1Score(precision, recall, f1)


def _g6(v) -> str:
    return "" if isinstance(v, float) and math.isnan(v) else f"{v:.6g}"


OBJECT_HEADER = ("id", "area_m2", "pixel_count", "mean_s2_diff", "bbox_min_x", "bbox_min_y", "bbox_max_x",
                 "bbox_max_y")
BOX_HEADER = ("bucket", "n", "median", "q1", "q3", "whisker_low", "whisker_high", "outlier_count")


def write_objects(objects: list[ChangeObject], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OBJECT_HEADER)
        for o in objects:
            w.writerow([o.id, _g6(o.area), o.pixel_count, _g6(o.mean_s2_diff), *o.bbox])


def write_box_stats(rows: list[BoxplotStats], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BOX_HEADER)
        for b in rows:
            w.writerow([b.label, b.n] + [_g6(getattr(b, k)) for k in BOX_HEADER[2:7]] + [b.outlier_count])


def write_f1(score: F1Score, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["precision", "recall", "f1", "precision_undefined"])
        w.writerow([_g6(score.precision), _g6(score.recall), _g6(score.f1), int(score.precision_undefined)])
