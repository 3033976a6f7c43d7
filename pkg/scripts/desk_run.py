"""Full desk-scale run through the command line: synthesize, train, map two years, evaluate, detect change.

    python3 scripts/desk_run.py --out runs/desk --seed 0 --iterations 5000
"""

import argparse
import sys
from pathlib import Path

from vhm.cli import main as vhm
from vhm.raster import raster_diff, read_raster, write_raster


def step(*argv: str) -> None:
    print("vhm", " ".join(argv), flush=True)
    code = vhm(list(argv))
    if code:
        sys.exit(code)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iterations", type=int, default=5000)
    ap.add_argument("--with-dtm", default="true")
    args = ap.parse_args()

    root, data = args.out, args.out / "data"
    step("synth", "--seed", str(args.seed), "--out", str(data))
    (data / "run.cfg").write_text("checkpoint=../train/model.vhmw\n")
    cfg = str(data / "run.cfg")
    step("train", "--config", cfg, "--seed", str(args.seed), "--iterations", str(args.iterations),
         "--with-dtm", args.with_dtm, "--out", str(root / "train"))
    for year in (2021, 2023):
        step("predict", "--config", cfg, "--year", str(year), "--out", str(root / "pred"))
        step("composite", "--pred", str(root / "pred"), "--year", str(year), "--out", str(root / "map"))
        step("eval", "--pred", str(root / "map" / f"mean_{year}.rstr"), "--ref", str(data / f"ref_mean_{year}.rstr"),
             "--mask", str(data / "forest.rstr"), "--out", str(root / f"eval_{year}"))

    (data / "strata.cfg").write_text("mix_rate=mix_rate.rstr\ntree_cover_density=tree_cover_density_2021.rstr\n")
    step("strata", "--pred", str(root / "map" / "mean_2021.rstr"), "--ref", str(data / "ref_mean_2021.rstr"),
         "--mask", str(data / "forest.rstr"), "--dtm", str(data / "dtm.rstr"), "--config", str(data / "strata.cfg"),
         "--out", str(root / "eval_2021"))

    diff = raster_diff(read_raster(root / "map" / "mean_2023.rstr"), read_raster(root / "map" / "mean_2021.rstr"))
    write_raster(diff, root / "map" / "diff.rstr")
    step("change", "--diff1m", str(data / "ref_diff_1m.rstr"), "--diff10m", str(root / "map" / "diff.rstr"),
         "--mask", str(data / "forest.rstr"), "--ref", str(data / "change_ref.rstr"), "--out", str(root / "change"))
    print((root / "eval_2021" / "metrics.csv").read_text())
    print((root / "change" / "boxstats.csv").read_text())


if __name__ == "__main__":
    main()
