"""Run configuration and the multi-step procedures shared by the CLI and the experiment scripts."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import pipeline as pl
from .model import Model, ModelConfig, build, parse_kv, tiny_config
from .raster import GridSpec, Raster, bilinear_resample, read_raster, slope_aspect, write_raster
from .training import CENTER, FitResult, NormStats, PatchSet, TrainConfig, fit, save_norm, write_log

HOLDOUT_BLOCK = 20


def desk_train_config(**overrides) -> TrainConfig:
    """Settings that fit a 5,000-iteration CPU run in a few minutes."""
    base = dict(batch_size=4, learning_rate=1e-3, iterations=5000, epoch_sample=20000,
                val_interval=500, log_interval=100)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class RunConfig:
    """Paths (relative to ``base``) and settings of one training/prediction run."""

    base: Path = Path(".")
    manifest: str = "manifest.csv"
    dtm: str = "dtm.rstr"
    ref_mean: str = "ref_mean_{year}.rstr"
    ref_max: str = "ref_max_{year}.rstr"
    forest: str = "forest.rstr"
    checkpoint: str = "model.vhmw"
    train_years: tuple[int, ...] = (2021,)
    with_dtm: bool = True
    holdout: bool = True
    model: ModelConfig = field(default_factory=tiny_config)
    train: TrainConfig = field(default_factory=desk_train_config)

    def path(self, name: str, year: int | None = None) -> Path:
        return self.base / getattr(self, name).format(year=year)

    @classmethod
    def from_text(cls, text: str, base: Path, with_dtm: bool | None = None, width_mult=None,
                  iterations: int | None = None, seed: int | None = None) -> RunConfig:
        kv = parse_kv(text)
        model_kv = {k[6:]: v for k, v in kv.items() if k.startswith("model.")}
        train_kv = {k[6:]: v for k, v in kv.items() if k.startswith("train.")}
        rest = {k: v for k, v in kv.items() if "." not in k}
        extra = set(kv) - {f"model.{k}" for k in model_kv} - {f"train.{k}" for k in train_kv} - set(rest)
        known = {f.name for f in fields(cls)} - {"base", "model", "train"}
        extra |= set(rest) - known
        if extra:
            raise ValueError(f"unknown run config keys: {sorted(extra)}")
        args: dict = {"base": Path(base)}
        for k, v in rest.items():
            if k == "train_years":
                args[k] = tuple(int(y) for y in v.split(","))
            elif k in ("with_dtm", "holdout"):
                args[k] = parse_bool(v)
            else:
                args[k] = v
        if with_dtm is not None:
            args["with_dtm"] = with_dtm
        mtext = "".join(f"{k}={v}\n" for k, v in model_kv.items())
        mcfg = ModelConfig.from_text(mtext) if model_kv else tiny_config()
        in_ch = 5 if args.get("with_dtm", True) else 4
        updates = {"in_channels": in_ch}
        if width_mult is not None:
            updates["width_multiplier"] = Fraction(width_mult)
        args["model"] = ModelConfig(**{**{f.name: getattr(mcfg, f.name) for f in fields(mcfg)}, **updates})
        tbase = desk_train_config()
        ttext = "".join(f"{k}={v}\n" for k, v in {**{f.name: getattr(tbase, f.name) for f in fields(tbase)},
                                                   **train_kv}.items())
        args["train"] = TrainConfig.from_text(ttext, iterations=iterations, seed=seed)
        return cls(**args)


def parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


# -- spatial hold-out -----------------------------------------------------------

def holdout_blocks(height: int, width: int, block: int = HOLDOUT_BLOCK) -> np.ndarray:
    """Boolean map of held-out test blocks: one block in five, in a Latin-square pattern."""
    bi = np.arange(height) // block
    bj = np.arange(width) // block
    return (bi[:, None] + 2 * bj[None, :]) % 5 == 0


def training_exclusion(held: np.ndarray) -> np.ndarray:
    """Centers whose 15x15 window touches a held-out block."""
    return ndimage.binary_dilation(held, np.ones((2 * CENTER + 1,) * 2, bool))


# -- training data --------------------------------------------------------------

def collect_patches(scenes: list[pl.Scene], ref_mean: Raster, ref_max: Raster, dtm: Raster | None,
                    year: int) -> PatchSet | None:
    sel = pl.select_scenes(scenes, year)
    if not sel:
        return None
    sel = pl.rank_by_valid_patches(sel, ref_mean, ref_max, dtm)
    samples = [p for s in sel for p in pl.extract_patches(s, ref_mean, ref_max, dtm)]
    return PatchSet.from_samples(samples) if samples else None


def split_holdout(patches: PatchSet, width: int, height: int) -> tuple[PatchSet, PatchSet]:
    held = holdout_blocks(height, width)
    excl = training_exclusion(held)
    train = ~excl.ravel()[patches.location]
    test = held.ravel()[patches.location]
    return patches.subset(np.flatnonzero(train)), patches.subset(np.flatnonzero(test))


@dataclass
class TrainOutcome:
    fit: FitResult
    test: PatchSet | None
    baseline: np.ndarray      # mean training target per channel


def train_run(run: RunConfig, out_dir=None) -> TrainOutcome:
    scenes = pl.read_manifest(run.path("manifest"))
    dtm = read_raster(run.path("dtm")) if run.with_dtm else None
    sets = []
    grid = None
    for year in run.train_years:
        rm, rx = read_raster(run.path("ref_mean", year)), read_raster(run.path("ref_max", year))
        grid = rm.grid
        ps = collect_patches(scenes, rm, rx, dtm, year)
        if ps is not None:
            sets.append(ps)
    if not sets:
        raise ValueError("no training patches found")
    patches = PatchSet.concat(sets)
    test = None
    if run.holdout:
        patches, test = split_holdout(patches, grid.width, grid.height)
    model = build(run.model, seed=run.train.seed)
    result = fit(model, patches, run.train)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        model.save(out / "model.vhmw")
        save_norm(result.norm, out / "norm.txt")
        write_log(result.log, out / "train_log.csv")
    return TrainOutcome(result, test, patches.y.mean(axis=0))


# -- prediction -----------------------------------------------------------------

def predict_year(model: Model, norm: NormStats, scenes: list[pl.Scene], dtm: Raster | None, year: int,
                 out_dir=None) -> list[tuple[Raster, Raster]]:
    """Masked predictions for the selected scenes of ``year``; optionally written per date."""
    preds = []
    for s in pl.select_scenes(scenes, year):
        mean, mx = pl.predict_scene(model, s, dtm, norm)
        mean, mx = pl.mask_invalid(mean, s), pl.mask_invalid(mx, s)
        preds.append((mean, mx))
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            write_raster(mean, out / f"pred_mean_{s.date.isoformat()}.rstr")
            write_raster(mx, out / f"pred_max_{s.date.isoformat()}.rstr")
    return preds


def read_predictions(pred_dir, year: int) -> list[tuple[Raster, Raster]]:
    d = Path(pred_dir)
    out = []
    for p in sorted(d.glob(f"pred_mean_{year:04d}-*.rstr")):
        q = d / p.name.replace("pred_mean_", "pred_max_")
        out.append((read_raster(p), read_raster(q)))
    if not out:
        raise FileNotFoundError(f"no predictions for {year} in {d}")
    return out


# -- terrain strata ---------------------------------------------------------------

def terrain_strata(dtm: Raster, target: GridSpec) -> dict[str, Raster]:
    """Elevation, slope and aspect on ``target``; aspect is interpolated through its sine and cosine."""
    slope, aspect = slope_aspect(dtm)
    if dtm.grid == target:
        return {"elevation": dtm, "slope": slope, "aspect": aspect}
    elev = bilinear_resample(dtm, target)
    slope_t = bilinear_resample(slope, target)
    rad = np.deg2rad(aspect.data[0].astype(np.float64))
    ok = aspect.valid()
    s = Raster.from_masked(np.sin(rad), ok, aspect.grid, aspect.nodata)
    c = Raster.from_masked(np.cos(rad), ok, aspect.grid, aspect.nodata)
    st, ct = bilinear_resample(s, target), bilinear_resample(c, target)
    valid = st.valid() & ct.valid() & (np.hypot(st.data[0], ct.data[0]) > 1e-6)
    deg = np.mod(np.rad2deg(np.arctan2(st.data[0], ct.data[0])), 360.0)
    return {"elevation": elev, "slope": slope_t, "aspect": Raster.from_masked(deg, valid, target, aspect.nodata)}


def aligned_or_resampled(r: Raster, target: GridSpec) -> Raster:
    return r if r.grid == target else bilinear_resample(r, target)
