"""``vhm`` command-line entry point.

Exit codes: 0 success, 1 invalid arguments or configuration, 2 file input/output failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from fractions import Fraction
from pathlib import Path

from . import change as ch
from . import evaluation as ev
from . import pipeline as pl
from .gradcheck import gradcheck
from .model import Model, parse_kv
from .raster import pool_resample, read_raster, write_raster
from .synth import SynthConfig, synth_generate
from .training import load_norm
from .workflow import (RunConfig, aligned_or_resampled, parse_bool, predict_year, read_predictions,
                       terrain_strata, train_run)

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _u64(s: str) -> int:
    v = int(s)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"{s} is not an unsigned 64-bit integer")
    return v


def _u16(s: str) -> int:
    v = int(s)
    if not 0 <= v < 2**16:
        raise argparse.ArgumentTypeError(f"{s} is not an unsigned 16-bit integer")
    return v


def _bool(s: str) -> bool:
    try:
        return parse_bool(s)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _rational(s: str) -> Fraction:
    try:
        v = Fraction(s)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"{s} is not a rational number") from None
    if v <= 0:
        raise argparse.ArgumentTypeError("width multiplier must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vhm", description="Vegetation height mapping from multispectral scenes.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--out", type=Path, help="output directory")
        return s

    s = cmd("synth", "generate a synthetic world")
    s.add_argument("--config", type=Path)
    s.add_argument("--seed", type=_u64)

    s = cmd("resample", "pool a 1 m height raster to 10 m mean and max")
    s.add_argument("--ref", type=Path, required=True)
    s.add_argument("--config", type=Path, help="key=value file with factor=N")

    s = cmd("train", "train a model on a manifest of scenes")
    s.add_argument("--config", type=Path, required=True)
    s.add_argument("--seed", type=_u64)
    s.add_argument("--with-dtm", type=_bool)
    s.add_argument("--width-mult", type=_rational)
    s.add_argument("--iterations", type=_u64)

    s = cmd("predict", "predict and mask every selected scene of a year")
    s.add_argument("--config", type=Path, required=True)
    s.add_argument("--year", type=_u16, required=True)
    s.add_argument("--with-dtm", type=_bool)

    s = cmd("composite", "median-composite per-scene predictions of a year")
    s.add_argument("--pred", type=Path, required=True, help="directory of per-scene predictions")
    s.add_argument("--year", type=_u16, required=True)

    s = cmd("eval", "accuracy metrics of a height map against a reference")
    for flag in ("--pred", "--ref", "--mask"):
        s.add_argument(flag, type=Path, required=True)

    s = cmd("strata", "metrics per terrain and forest-property stratum")
    for flag in ("--pred", "--ref", "--mask", "--dtm"):
        s.add_argument(flag, type=Path, required=True)
    s.add_argument("--config", type=Path, help="key=value file naming mix_rate and tree_cover_density rasters")

    s = cmd("change", "change objects and their box-plot statistics")
    s.add_argument("--diff1m", type=Path, required=True)
    s.add_argument("--diff10m", type=Path, required=True)
    s.add_argument("--mask", type=Path, help="forest mask at 10 m")
    s.add_argument("--ref", type=Path, help="reference change mask at 10 m")

    s = cmd("gradcheck", "finite-difference check of the analytic gradients")
    s.add_argument("--seed", type=_u64, default=0)
    s.add_argument("--eps", type=float, default=1e-4)
    return p


def _out(args) -> Path:
    if args.out is None:
        raise ValueError("--out is required")
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def run_synth(args) -> int:
    text = args.config.read_text() if args.config else ""
    cfg = SynthConfig.from_text(text, seed=args.seed)
    world = synth_generate(cfg, _out(args))
    print(f"wrote synthetic world ({len(world.clearings)} clearings) to {args.out}")
    return EXIT_OK


def run_resample(args) -> int:
    factor = int(parse_kv(args.config.read_text()).get("factor", 10)) if args.config else 10
    src = read_raster(args.ref)
    out = _out(args)
    write_raster(pool_resample(src, factor, "mean"), out / "mean.rstr")
    write_raster(pool_resample(src, factor, "max"), out / "max.rstr")
    return EXIT_OK


def _run_config(args) -> RunConfig:
    return RunConfig.from_text(args.config.read_text(), base=args.config.parent,
                               with_dtm=getattr(args, "with_dtm", None), width_mult=getattr(args, "width_mult", None),
                               iterations=getattr(args, "iterations", None), seed=getattr(args, "seed", None))


def run_train(args) -> int:
    run = _run_config(args)
    res = train_run(run, _out(args))
    print(f"best validation MAE {res.fit.best_val_mae:.4f} at iteration {res.fit.best_iteration}")
    return EXIT_OK


def run_predict(args) -> int:
    run = _run_config(args)
    ckpt = run.path("checkpoint")
    model = Model.load(ckpt)
    uses_dtm = model.config.in_channels == 5
    if args.with_dtm is not None and args.with_dtm != uses_dtm:
        raise ValueError(f"checkpoint expects {model.config.in_channels} input channels; --with-dtm {args.with_dtm} "
                         "does not match")
    norm = load_norm(ckpt.parent / "norm.txt")
    dtm = read_raster(run.path("dtm")) if uses_dtm else None
    preds = predict_year(model, norm, pl.read_manifest(run.path("manifest")), dtm, args.year, _out(args))
    print(f"predicted {len(preds)} scenes for {args.year}")
    return EXIT_OK


def run_composite(args) -> int:
    annual = pl.annual_composite(read_predictions(args.pred, args.year), args.year)
    pl.write_annual(annual, _out(args))
    return EXIT_OK


def run_eval(args) -> int:
    pred, ref, forest = read_raster(args.pred), read_raster(args.ref), read_raster(args.mask)
    mask = ev.build_eval_mask(ref, forest)
    out = _out(args)
    ev.write_metrics(ev.compute_metrics(pred, ref, mask), out / "metrics.csv")
    ev.write_residual_bins(ev.residual_bins(pred, ref, mask), out / "residual_bins.csv")
    ev.write_density_scatter(ev.density_scatter_export(pred, ref, mask), out / "scatter.csv")
    return EXIT_OK


def run_strata(args) -> int:
    pred, ref, forest = read_raster(args.pred), read_raster(args.ref), read_raster(args.mask)
    mask = ev.build_eval_mask(ref, forest)
    strata = terrain_strata(read_raster(args.dtm), pred.grid)
    if args.config:
        for key, rel in parse_kv(args.config.read_text()).items():
            if key not in ("mix_rate", "tree_cover_density"):
                raise ValueError(f"unknown strata raster {key!r}")
            strata[key] = aligned_or_resampled(read_raster(args.config.parent / rel), pred.grid)
    rows = ev.stratified_metrics(pred, ref, mask, strata)
    ev.write_report(rows, _out(args) / "strata.csv")
    return EXIT_OK


def run_change(args) -> int:
    d1, d10 = read_raster(args.diff1m), read_raster(args.diff10m)
    objects = ch.attach_means(ch.change_objects(d1), d10, d1)
    out = _out(args)
    ch.write_objects(objects, out / "objects.csv")
    rows = ch.bucket_stats(objects)
    if args.mask:
        rows.append(ch.unchanged_forest_stats(objects, d10, d1, read_raster(args.mask)))
    ch.write_box_stats(rows, out / "boxstats.csv")
    if args.ref:
        forest = read_raster(args.mask) if args.mask else None
        ch.write_f1(ch.change_mask_f1(d10, read_raster(args.ref), forest), out / "f1.csv")
    return EXIT_OK


def run_gradcheck(args) -> int:
    if not args.eps > 0:
        raise ValueError("--eps must be positive")
    res = gradcheck(seed=args.seed, eps=args.eps)
    print(f"max relative error {res.max_rel_error:.3e} over {sum(res.checked.values())} parameters "
          f"({res.skipped_kinks} redrawn at ReLU kinks)")
    return EXIT_OK if res.passed(1e-4) else EXIT_INVALID


COMMANDS = {"synth": run_synth, "resample": run_resample, "train": run_train, "predict": run_predict,
            "composite": run_composite, "eval": run_eval, "strata": run_strata, "change": run_change,
            "gradcheck": run_gradcheck}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"vhm: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    try:
        return COMMANDS[args.command](args)
    except OSError as e:  # includes malformed raster and checkpoint files
        print(f"vhm: i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"vhm: invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
