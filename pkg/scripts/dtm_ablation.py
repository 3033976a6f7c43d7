"""Held-out error with and without the terrain channel over several synthetic worlds.

    python3 scripts/dtm_ablation.py --out runs/ablation --seeds 0 1 2
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from vhm.model import tiny_config
from vhm.synth import SynthConfig, synth_generate
from vhm.training import apply_norm, predict_centers
from vhm.workflow import RunConfig, desk_train_config, train_run


def held_out_mae(outcome) -> tuple[float, float]:
    res, test = outcome.fit, outcome.test
    pred = predict_centers(res.model, apply_norm(test.x, res.norm))
    return float(np.abs(pred - test.y).mean()), float(np.abs(test.y - outcome.baseline).mean())


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--iterations", type=int, default=5000)
    ap.add_argument("--noise", type=float, default=0.5)
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "with_dtm", "mae", "baseline_mae"])
        for seed in args.seeds:
            data = args.out / f"world_{seed}"
            synth_generate(SynthConfig(seed=seed, noise_std=args.noise), data)
            for with_dtm in (True, False):
                run = RunConfig(base=data, with_dtm=with_dtm, model=tiny_config(in_channels=5 if with_dtm else 4),
                                train=desk_train_config(seed=seed, iterations=args.iterations))
                mae, base = held_out_mae(train_run(run))
                w.writerow([seed, with_dtm, f"{mae:.4f}", f"{base:.4f}"])
                fh.flush()
                print(f"seed {seed} dtm={with_dtm}: MAE {mae:.3f} (constant baseline {base:.3f})", flush=True)


if __name__ == "__main__":
    main()
