"""Run a simulated benchmark case and print a per-method summary table.

    python3 scripts/run_benchmark.py --case 2 --preset desk --reps 10 --out runs/case2.json
"""

import argparse
import time

import numpy as np

from htgp.bench import ALL_METHODS, case_spec, preset, run_benchmark
from htgp.dataio import write_results_json


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--case", type=int, default=2, choices=(1, 2, 3))
    ap.add_argument("--preset", default="desk", choices=("desk", "paper"))
    ap.add_argument("--methods", nargs="+", default=["R2HGP", "TGP", "IMC"], choices=ALL_METHODS)
    ap.add_argument("--reps", type=int, default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    cfg = preset(args.preset)
    reps = args.reps or cfg.repetitions
    t = time.perf_counter()
    res = run_benchmark(case_spec(args.case), args.methods, reps, args.seed, cfg)
    print(f"case {args.case}, preset {args.preset}, {reps} repetitions, seed {args.seed}, "
          f"{(time.perf_counter() - t) / 60:.1f} min")
    print(f"{'method':<10}{'RMSE':>18}{'R^2':>18}{'MNLL':>22}")
    for m in args.methods:
        row = res["methods"][m]
        if row["rmse"]["mean"] is None:
            print(f"{m:<10}  failed in every repetition")
            continue
        cells = [f"{row[k]['mean']:.3f} ± {row[k]['std']:.3f}" for k in ("rmse", "r2")]
        cells.append(f"{row['mnll']['mean']:.4g} ± {row['mnll']['std']:.3g}")
        print(f"{m:<10}{cells[0]:>18}{cells[1]:>18}{cells[2]:>22}")
        if row.get("rho"):
            rho = np.array([r for r in row["rho"] if r is not None])
            print(f"{'':<10}median |rho| {np.round(np.median(np.abs(rho), axis=0), 3)}")
    if args.out:
        write_results_json(args.out, res)


if __name__ == "__main__":
    main()
