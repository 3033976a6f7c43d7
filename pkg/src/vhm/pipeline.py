"""Scene selection, valid-patch extraction, tiled inference, masking and annual compositing."""

from __future__ import annotations

import csv
import datetime as dt
import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import Model
from .raster import Raster, read_raster, require_aligned, write_raster
from .training import CENTER, PATCH, NormStats, PatchSample, apply_norm

log = logging.getLogger(__name__)

# Sentinel-2 scene classification codes
WATER = 6
SNOW = 11
CLOUD_LIMIT = 10.0
TILE = 512
OVERLAP = 16
MANIFEST_FIELDS = ("tile_id", "date", "bands_path", "cloud_path", "landcover_path")


@dataclass
class Scene:
    bands: Raster        # red, green, blue, near-infrared
    cloud_prob: Raster   # percent
    landcover: Raster    # scene classification codes
    date: dt.date
    tile_id: str = "T0"

    def __post_init__(self):
        if self.bands.bands != 4:
            raise ValueError(f"scene needs 4 bands, got {self.bands.bands}")
        require_aligned(self.bands, self.cloud_prob, self.landcover)

    @property
    def mean_cloud(self) -> float:
        return float(self.cloud_prob.data[0].astype(np.float64).mean())


@dataclass
class AnnualMap:
    mean_height: Raster
    max_height: Raster
    valid_count: Raster
    year: int


def in_season(date: dt.date, year: int) -> bool:
    return dt.date(year, 5, 1) <= date <= dt.date(year, 9, 30)


def select_scenes(scenes: list[Scene], year: int, keep: int = 10) -> list[Scene]:
    """Leaf-on scenes of ``year`` ranked by mean cloud probability (then date), best ``keep``."""
    tiles = {s.tile_id for s in scenes}
    if len(tiles) > 1:
        raise ValueError(f"scenes span several tiles: {sorted(tiles)}")
    season = [s for s in scenes if in_season(s.date, year)]
    if not season:
        warnings.warn(f"no leaf-on scenes in {year}", stacklevel=2)
        return []
    season.sort(key=lambda s: (s.mean_cloud, s.date))
    return season[:keep]


def valid_centers(scene: Scene, target_mean: Raster, target_max: Raster, dtm: Raster | None = None) -> np.ndarray:
    """Boolean grid of centers whose 15x15 patch is usable for training."""
    rasters = [scene.bands, target_mean, target_max] + ([dtm] if dtm is not None else [])
    require_aligned(scene.cloud_prob, *rasters)
    h, w = target_mean.height, target_mean.width
    ok = target_mean.valid() & target_max.valid() & (scene.cloud_prob.data[0] < CLOUD_LIMIT)
    ok &= scene.cloud_prob.valid()
    inputs_ok = np.ones((h, w), dtype=bool)
    for b in range(4):
        inputs_ok &= scene.bands.valid(b)
    if dtm is not None:
        inputs_ok &= dtm.valid()
    # every input pixel in the window must be valid: box-count over the window
    bad = np.pad((~inputs_ok).astype(np.int64), ((1, 0), (1, 0))).cumsum(0).cumsum(1)
    r = CENTER
    out = np.zeros((h, w), dtype=bool)
    if h < PATCH or w < PATCH:
        return out
    win = (bad[PATCH:, PATCH:] - bad[:-PATCH, PATCH:] - bad[PATCH:, :-PATCH] + bad[:-PATCH, :-PATCH])
    out[r:h - r, r:w - r] = ok[r:h - r, r:w - r] & (win == 0)
    return out


def rank_by_valid_patches(scenes: list[Scene], target_mean: Raster, target_max: Raster,
                          dtm: Raster | None = None, keep: int = 2) -> list[Scene]:
    """The ``keep`` scenes with the most valid patches; ties go to the earlier date."""
    counts = [int(valid_centers(s, target_mean, target_max, dtm).sum()) for s in scenes]
    order = sorted(range(len(scenes)), key=lambda i: (-counts[i], scenes[i].date))
    return [scenes[i] for i in order[:keep]]


def scene_input(scene: Scene, dtm: Raster | None = None, norm: NormStats | None = None) -> np.ndarray:
    """Model input ``(C, H, W)``: four bands plus the DTM, normalized if ``norm`` is given."""
    layers = [scene.bands.data.astype(np.float32)]
    valid = np.stack([scene.bands.valid(b) for b in range(4)])
    if dtm is not None:
        require_aligned(scene.bands, dtm)
        layers.append(dtm.data.astype(np.float32))
        valid = np.concatenate([valid, dtm.valid()[None]])
    x = np.concatenate(layers)
    if norm is not None:
        x = apply_norm(x, norm)
    x[~valid] = 0.0
    return x


def extract_patches(scene: Scene, target_mean: Raster, target_max: Raster, dtm: Raster | None = None,
                    norm: NormStats | None = None) -> list[PatchSample]:
    """One sample per valid center: clear center pixel, valid targets, patch inside the raster."""
    centers = valid_centers(scene, target_mean, target_max, dtm)
    x = scene_input(scene, dtm, norm)
    ym, yx = target_mean.data[0], target_max.data[0]
    w = target_mean.width
    r = CENTER
    out = []
    for row, col in zip(*np.nonzero(centers)):
        out.append(PatchSample(x[:, row - r:row + r + 1, col - r:col + r + 1].copy(),
                               float(ym[row, col]), float(yx[row, col]), int(row * w + col),
                               scene.date.year))
    return out


def tile_starts(n: int, tile: int = TILE, overlap: int = OVERLAP) -> list[int]:
    if n <= tile:
        return [0]
    stride = tile - overlap
    starts = list(range(0, n - tile, stride))
    starts.append(n - tile)
    return starts


def tile_ownership(n: int, tile: int = TILE, overlap: int = OVERLAP) -> list[tuple[int, int, int]]:
    """``(start, own_lo, own_hi)`` per tile; owned spans split each overlap at its midpoint."""
    starts = tile_starts(n, tile, overlap)
    size = min(n, tile)
    bounds = [0] + [(b + a + size) // 2 for a, b in zip(starts, starts[1:])] + [n]
    return [(s, bounds[i], bounds[i + 1]) for i, s in enumerate(starts)]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("VHM_THREADS", "1")))
    except ValueError:
        return 1


def predict_array(model: Model, x: np.ndarray, tile: int = TILE, overlap: int = OVERLAP) -> np.ndarray:
    """Tiled eval-mode prediction of ``(C, H, W)`` into ``(2, H, W)`` (not clamped)."""
    c, h, w = x.shape
    out = np.empty((model.config.out_channels, h, w), dtype=np.float32)
    rows, cols = tile_ownership(h, tile, overlap), tile_ownership(w, tile, overlap)
    th, tw = min(h, tile), min(w, tile)

    def run(job):
        (r0, rlo, rhi), (c0, clo, chi) = job
        xt = np.ascontiguousarray(x[:, r0:r0 + th, c0:c0 + tw].transpose(1, 2, 0)[None], dtype=model.dtype)
        pred = model.apply(ad.Tensor(xt), training=False).value[0]
        out[:, rlo:rhi, clo:chi] = pred[rlo - r0:rhi - r0, clo - c0:chi - c0].transpose(2, 0, 1)

    jobs = [(r, cc) for r in rows for cc in cols]
    n = _threads()
    if n == 1:
        for j in jobs:
            run(j)
    else:
        with ThreadPoolExecutor(n) as pool:
            list(pool.map(run, jobs))
    return out


def predict_scene(model: Model, scene: Scene, dtm: Raster | None, norm: NormStats | None,
                  tile: int = TILE, overlap: int = OVERLAP) -> tuple[Raster, Raster]:
    """Mean and max height rasters for one scene; negative heights are clamped to 0."""
    pred = np.maximum(predict_array(model, scene_input(scene, dtm, norm), tile, overlap), 0)
    g = scene.bands.grid
    return Raster(pred[0], g, scene.bands.nodata), Raster(pred[1], g, scene.bands.nodata)


def mask_invalid(pred: Raster, scene: Scene) -> Raster:
    """Set nodata where the scene is cloudy (> 10 %) or classified as water or snow."""
    require_aligned(pred, scene.cloud_prob)
    lc = scene.landcover.data[0]
    bad = (scene.cloud_prob.data[0] > CLOUD_LIMIT) | ~scene.cloud_prob.valid() | (lc == WATER) | (lc == SNOW)
    data = pred.data.copy()
    data[:, bad] = np.float32(pred.nodata)
    return Raster(data, pred.grid, pred.nodata)


def _median_stack(rasters: list[Raster]) -> tuple[np.ndarray, np.ndarray]:
    vals = np.stack([np.where(r.valid(), r.data[0].astype(np.float64), np.nan) for r in rasters])
    count = (~np.isnan(vals)).sum(axis=0)
    srt = np.sort(vals, axis=0)  # NaN sorts last
    lo = np.clip((count - 1) // 2, 0, None)
    hi = np.clip(count // 2, 0, None)
    a = np.take_along_axis(srt, lo[None], 0)[0]
    b = np.take_along_axis(srt, hi[None], 0)[0]
    return (a + b) / 2, count


def annual_composite(predictions: list[tuple[Raster, Raster]], year: int) -> AnnualMap:
    """Per-pixel median over the valid scene predictions of one year."""
    if not predictions:
        raise ValueError("no predictions to composite")
    means = [p[0] for p in predictions]
    maxes = [p[1] for p in predictions]
    require_aligned(*means, *maxes)
    g, nodata = means[0].grid, means[0].nodata
    med_mean, count = _median_stack(means)
    med_max, count_max = _median_stack(maxes)
    return AnnualMap(Raster.from_masked(med_mean, count > 0, g, nodata),
                     Raster.from_masked(med_max, count_max > 0, g, nodata),
                     Raster(count.astype(np.float32), g, nodata), year)


def write_annual(annual: AnnualMap, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for key, r in (("mean", annual.mean_height), ("max", annual.max_height), ("count", annual.valid_count)):
        p = out_dir / f"{key}_{annual.year:04d}.rstr"
        write_raster(r, p)
        paths[key] = p
    return paths


def read_manifest(path) -> list[Scene]:
    path = Path(path)
    base = path.parent
    scenes = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: manifest lacks columns {sorted(missing)}")
        for row in reader:
            scenes.append(Scene(read_raster(base / row["bands_path"]), read_raster(base / row["cloud_path"]),
                                read_raster(base / row["landcover_path"]),
                                dt.date.fromisoformat(row["date"]), row["tile_id"]))
    return scenes


def write_manifest(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
