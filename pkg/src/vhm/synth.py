"""Deterministic synthetic landscape: canopy heights, terrain, satellite scenes and planted clearings.

Everything is derived from one seed so a given config always produces byte-identical files.
Heights live on a 1 m grid; scenes, targets and masks on the 10 m grid obtained by
aggregating 10x10 blocks.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .model import parse_kv
from .pipeline import SNOW, WATER, Scene, write_manifest
from .raster import GridSpec, Raster, pool_resample, write_raster

VEGETATION = 4
BARE = 5
FACTOR = 10


@dataclass
class SynthConfig:
    seed: int = 0
    extent: int = 1000                 # pixels at 1 m; multiple of 10
    forest_fraction: float = 0.65
    height_scale: float = 40.0         # smoothing length of the canopy field, m
    max_height: float = 45.0
    crown_scale: float = 2.0
    crown_amplitude: float = 3.0
    saturation: float = 8.0            # decay length of the visible bands, m
    nir_saturation: float = 12.0
    noise_std: float = 0.5             # per band, in percent reflectance
    dtm_base: float = 600.0
    relief: float = 900.0              # DTM amplitude, m
    relief_scale: float = 150.0
    treeline: float = 1400.0           # potential height falls to its floor here
    height_floor: float = 18.0         # potential canopy height at and above the tree line
    years: tuple[int, int] = (2021, 2023)
    scenes_per_year: int = 6
    cloud_scale: float = 60.0
    water_fraction: float = 0.02
    n_clearings: int = 10
    clearing_area: tuple[float, float] = (300.0, 5000.0)
    n_small_clearings: int = 6
    small_area: tuple[float, float] = (25.0, 100.0)
    drop: tuple[float, float] = (12.0, 25.0)
    growth: float = 0.3

    def validate(self) -> None:
        if self.extent % FACTOR or self.extent < 20 * FACTOR:
            raise ValueError(f"extent must be a multiple of {FACTOR} and at least {20 * FACTOR}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not 0 < self.max_height <= 45:
            raise ValueError("max_height must lie in (0, 45]")
        lo, hi = self.drop
        if not 10 <= lo <= hi <= 40:
            raise ValueError("drop range must lie within [10, 40] m")
        if not 0 < self.forest_fraction < 1:
            raise ValueError("forest_fraction must lie in (0, 1)")

    @classmethod
    def from_text(cls, text: str, **overrides) -> SynthConfig:
        kv = parse_kv(text)
        known = {f.name: f for f in fields(cls)}
        args = {}
        for k, v in kv.items():
            if k not in known:
                raise ValueError(f"unknown synth key {k!r}")
            default = getattr(cls(), k)
            if isinstance(default, tuple):
                args[k] = tuple(type(default[0])(s) for s in v.split(","))
            else:
                args[k] = type(default)(v)
        args.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls(**args)
        cfg.validate()
        return cfg


# -- band model ---------------------------------------------------------------

def band_model(h: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """Noise-free reflectance ``(4, ...)`` of canopy height ``h``: red, green, blue, NIR."""
    h = np.asarray(h, dtype=np.float64)
    d = np.exp(-h / cfg.saturation)
    n = 1.0 - np.exp(-h / cfg.nir_saturation)
    red = 0.03 + 0.22 * d
    green = 0.05 + 0.12 * d + 0.03 * n
    blue = 0.02 + 0.10 * d
    nir = 0.20 + 0.25 * n
    return np.stack([red, green, blue, nir])


def invert_red(red: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """Height from the noise-free red band (exact inverse of the decay term)."""
    return -cfg.saturation * np.log((np.asarray(red, np.float64) - 0.03) / 0.22)


# -- fields -----------------------------------------------------------------

def _smooth(rng, shape, scale) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), scale, mode="wrap")
    return (f - f.mean()) / f.std()


def _unit(f: np.ndarray) -> np.ndarray:
    return (f - f.min()) / (f.max() - f.min())


@dataclass
class Clearing:
    row: int
    col: int
    height: int
    width: int
    drop: float
    large: bool

    @property
    def area(self) -> int:
        return self.height * self.width


@dataclass
class World:
    config: SynthConfig
    grid_1m: GridSpec
    grid_10m: GridSpec
    dtm: np.ndarray               # 1 m
    forest_1m: np.ndarray         # bool
    heights: dict[int, np.ndarray]  # year -> 1 m heights
    clearings: list[Clearing]
    water: np.ndarray             # 10 m bool
    mix_rate: np.ndarray          # 10 m percent broadleaf
    scenes: dict[int, list[Scene]] = field(default_factory=dict)

    def raster_1m(self, a) -> Raster:
        return Raster(a, self.grid_1m)

    def raster_10m(self, a) -> Raster:
        return Raster(a, self.grid_10m)

    def target(self, year: int, mode: str) -> Raster:
        return pool_resample(self.raster_1m(self.heights[year]), FACTOR, mode)

    def dtm_10m(self) -> Raster:
        return pool_resample(self.raster_1m(self.dtm), FACTOR, "mean")

    def forest_10m(self) -> Raster:
        frac = pool_resample(self.raster_1m(self.forest_1m.astype(np.float32)), FACTOR, "mean").data[0]
        return self.raster_10m((frac >= 0.5).astype(np.float32))

    def tree_cover_density(self, year: int) -> Raster:
        cover = (self.heights[year] > 3.0).astype(np.float32) * 100
        return pool_resample(self.raster_1m(cover), FACTOR, "mean")

    def change_reference(self) -> Raster:
        """10 m mask of cells inside planted clearings that are snapped to the 10 m grid."""
        n = self.grid_10m.height
        m = np.zeros((n, n), np.float32)
        for c in self.clearings:
            if c.large:
                m[c.row // FACTOR:(c.row + c.height) // FACTOR, c.col // FACTOR:(c.col + c.width) // FACTOR] = 1
        return self.raster_10m(m)

    def ref_diff_1m(self) -> Raster:
        y1, y2 = self.config.years
        return self.raster_1m(self.heights[y2] - self.heights[y1])


def _place(rng, occupied, h1, size, min_drop, snap, n_cells) -> tuple[int, int] | None:
    hh, ww = size
    for _ in range(2000):
        if snap:
            r = int(rng.integers(1, (n_cells - hh) // FACTOR)) * FACTOR
            c = int(rng.integers(1, (n_cells - ww) // FACTOR)) * FACTOR
        else:
            r = int(rng.integers(FACTOR, n_cells - hh - FACTOR))
            c = int(rng.integers(FACTOR, n_cells - ww - FACTOR))
        # keep a 10 m moat so objects never touch and 10 m cells are never shared
        if occupied[max(r - FACTOR, 0):r + hh + FACTOR, max(c - FACTOR, 0):c + ww + FACTOR].any():
            continue
        if h1[r:r + hh, c:c + ww].min() <= min_drop + 0.5:
            continue
        return r, c
    return None


def _clearing_shape(rng, area_range, snap) -> tuple[int, int]:
    """Rectangle (rows, cols) in metres with area inside ``area_range``; multiples of 10 m when ``snap``."""
    area = rng.uniform(*area_range)
    aspect = rng.uniform(0.6, 1.6)
    unit = FACTOR if snap else 1
    lo, hi, target = area_range[0] / unit**2, area_range[1] / unit**2, area / unit**2
    best, best_score = None, math.inf
    for h in range(1, int(hi) + 1):
        w_lo, w_hi = max(1, math.ceil(lo / h)), math.floor(hi / h)
        if w_lo > w_hi:
            continue
        w = min(max(round(target / h), w_lo), w_hi)
        score = abs(math.log(h / w / aspect)) + abs(h * w - target) / target
        if score < best_score:
            best, best_score = (h * unit, w * unit), score
    if best is None:
        raise ValueError(f"no {unit} m rectangle has an area in {area_range}")
    return best


def build_world(cfg: SynthConfig) -> World:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.extent
    g1 = GridSpec(n, n, 1.0, 0.0, float(n))
    g10 = GridSpec(n // FACTOR, n // FACTOR, float(FACTOR), 0.0, float(n))

    # terrain: tilted plane plus hills, spanning roughly dtm_base .. dtm_base + relief
    yy, xx = np.mgrid[0:n, 0:n] / n
    hills = _smooth(rng, (n, n), cfg.relief_scale)
    dtm = cfg.dtm_base + cfg.relief * _unit(0.6 * (xx + yy) / 2 + 0.4 * _unit(hills))

    # potential height shrinks with elevation towards a tree line
    t = np.clip((cfg.treeline - dtm) / (cfg.treeline - dtm.min()), 0, 1)
    potential = cfg.height_floor + (cfg.max_height - 1.0 - cfg.height_floor) * t
    vigour = 0.8 + 0.2 * _unit(_smooth(rng, (n, n), cfg.height_scale))
    crowns = cfg.crown_amplitude * _smooth(rng, (n, n), cfg.crown_scale)
    forest_field = _smooth(rng, (n, n), 2 * cfg.height_scale)
    forest = forest_field > np.quantile(forest_field, 1 - cfg.forest_fraction)
    low = 1.5 * _unit(_smooth(rng, (n, n), 5.0))
    h1 = np.where(forest, potential * vigour + crowns, low)
    h1 = np.clip(h1, 0, cfg.max_height - 1.0)

    water_field = _smooth(rng, (n // FACTOR, n // FACTOR), 6.0)
    water = water_field > np.quantile(water_field, 1 - cfg.water_fraction)
    water_1m = np.kron(water, np.ones((FACTOR, FACTOR), bool))
    h1[water_1m] = 0.0
    forest &= ~water_1m

    # clearings between the two years
    occupied = water_1m.copy()
    clearings = []
    for large, count, area in ((True, cfg.n_clearings, cfg.clearing_area),
                               (False, cfg.n_small_clearings, cfg.small_area)):
        for _ in range(count):
            for _attempt in range(20):
                size = _clearing_shape(rng, area, snap=large)
                pos = _place(rng, occupied, h1, size, cfg.drop[0], large, n)
                if pos is not None:
                    break
            else:
                raise ValueError("extent too small for the requested clearings")
            r, c = pos
            # the drop may not exceed the shortest tree it removes
            top = min(cfg.drop[1], float(h1[r:r + size[0], c:c + size[1]].min()) - 0.5)
            drop = float(rng.uniform(cfg.drop[0], top))
            occupied[r:r + size[0], c:c + size[1]] = True
            clearings.append(Clearing(r, c, size[0], size[1], drop, large))
    h2 = np.where(forest, np.minimum(h1 + cfg.growth, cfg.max_height), h1)
    for c in clearings:
        h2[c.row:c.row + c.height, c.col:c.col + c.width] = h1[c.row:c.row + c.height, c.col:c.col + c.width] - c.drop

    mix = 100 * _unit(_smooth(rng, (n // FACTOR, n // FACTOR), 8.0))
    world = World(cfg, g1, g10, dtm.astype(np.float32), forest,
                  {cfg.years[0]: h1.astype(np.float32), cfg.years[1]: h2.astype(np.float32)},
                  clearings, water, mix.astype(np.float32))
    for year in cfg.years:
        world.scenes[year] = make_scenes(world, year, rng)
    return world


SCENE_DATES = ((3, 20), (5, 12), (6, 8), (7, 3), (7, 28), (8, 22), (9, 16), (10, 30))


def make_scenes(world: World, year: int, rng: np.random.Generator) -> list[Scene]:
    cfg = world.config
    m = world.grid_10m.height
    h10 = pool_resample(world.raster_1m(world.heights[year]), FACTOR, "mean").data[0]
    clean = band_model(h10, cfg)
    dtm10 = world.dtm_10m().data[0]
    scenes = []
    dates = [SCENE_DATES[0]] + list(SCENE_DATES[1:cfg.scenes_per_year])
    for k, (mon, day) in enumerate(dates):
        # cloud: smooth field, thresholded at a per-scene cover fraction
        cover = [0.02, 0.1, 0.25, 0.4, 0.6][k % 5]
        cf = _smooth(rng, (m, m), cfg.cloud_scale / FACTOR)
        thr = np.quantile(cf, 1 - cover)
        cloud = np.clip(100 * (cf - thr + 0.5), 0, 100)
        noise = rng.normal(0, cfg.noise_std / 100, clean.shape)
        opacity = cloud / 100
        bands = np.clip((clean + noise) * (1 - opacity) + 0.8 * opacity, 0, 1)
        lc = np.full((m, m), VEGETATION, np.float32)
        lc[h10 < 1.0] = BARE
        lc[world.water] = WATER
        if mon < 5 or mon > 9:
            lc[dtm10 > np.quantile(dtm10, 0.7)] = SNOW
        scenes.append(Scene(world.raster_10m(bands), world.raster_10m(cloud), world.raster_10m(lc),
                            dt.date(year, mon, day), "T32TMT"))
    return scenes


def synth_generate(cfg: SynthConfig, out_dir) -> World:
    """Build the world and write every raster plus ``manifest.csv`` under ``out_dir``."""
    world = build_world(cfg)
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    write_raster(world.dtm_10m(), out / "dtm.rstr")
    write_raster(world.raster_1m(world.dtm), out / "dtm_1m.rstr")
    write_raster(world.forest_10m(), out / "forest.rstr")
    write_raster(world.raster_10m(world.mix_rate), out / "mix_rate.rstr")
    write_raster(world.change_reference(), out / "change_ref.rstr")
    write_raster(world.ref_diff_1m(), out / "ref_diff_1m.rstr")
    rows = []
    for year in cfg.years:
        write_raster(world.raster_1m(world.heights[year]), out / f"ref_1m_{year}.rstr")
        write_raster(world.target(year, "mean"), out / f"ref_mean_{year}.rstr")
        write_raster(world.target(year, "max"), out / f"ref_max_{year}.rstr")
        write_raster(world.tree_cover_density(year), out / f"tree_cover_density_{year}.rstr")
        for s in world.scenes[year]:
            stem = f"scenes/{s.tile_id}_{s.date.isoformat()}"
            write_raster(s.bands, out / f"{stem}_bands.rstr")
            write_raster(s.cloud_prob, out / f"{stem}_cloud.rstr")
            write_raster(s.landcover, out / f"{stem}_scl.rstr")
            rows.append({"tile_id": s.tile_id, "date": s.date.isoformat(), "bands_path": f"{stem}_bands.rstr",
                         "cloud_path": f"{stem}_cloud.rstr", "landcover_path": f"{stem}_scl.rstr"})
    write_manifest(rows, out / "manifest.csv")
    with open(out / "clearings.csv", "w") as fh:
        fh.write("row,col,height,width,area_m2,drop,large\n")
        for c in world.clearings:
            fh.write(f"{c.row},{c.col},{c.height},{c.width},{c.area},{c.drop:.6g},{int(c.large)}\n")
    return world
