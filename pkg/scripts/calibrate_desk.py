"""Sweep (lam, gamma) and alignment-noise initialization for R2HGP on one case.

Prints test RMSE and the learned rho per repetition and setting; used to pick
the desk preset without touching the acceptance seed.

    python3 scripts/calibrate_desk.py --grid "1,0.1;0.1,0.1" --recog-logvar -6 --reps 4
"""

import argparse
import time
from dataclasses import replace

import numpy as np

from htgp.bench import case_spec, gen_case, metric_rmse, preset, resolve_references
from htgp.model import TransferData, TransferModel
from htgp.objective import ObjectiveConfig
from htgp.training import train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--case", type=int, default=2)
    ap.add_argument("--grid", default="1,0.1", help="semicolon-separated lam,gamma pairs")
    ap.add_argument("--epochs", type=int, default=3000)
    ap.add_argument("--recog-logvar", type=float, default=None)
    ap.add_argument("--prior-logvar", type=float, default=None)
    ap.add_argument("--prior-at-reference", action="store_true",
                    help="start the prior mean at the least-squares fit of the reference")
    ap.add_argument("--reps", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = preset("desk")
    mc = cfg.model
    if args.recog_logvar is not None:
        mc = replace(mc, init_recog_logvar=args.recog_logvar)
    if args.prior_logvar is not None:
        mc = replace(mc, init_prior_logvar=args.prior_logvar)
    if args.prior_at_reference:
        mc = replace(mc, init_prior_at_reference=True)
    tc = replace(cfg.train, epochs=args.epochs)
    grid = [tuple(map(float, c.split(","))) for c in args.grid.split(";")]

    scores = {g: [] for g in grid}
    for rep in range(args.reps):
        case = gen_case(case_spec(args.case), args.seed, rep)
        refs = resolve_references(case, args.seed, rep, cfg)
        for lam, gamma in grid:
            t = time.perf_counter()
            model = TransferModel(TransferData(case.sources, case.target, refs), mc)
            train(model, ObjectiveConfig(lam=lam, gamma=gamma), tc, args.seed, rep=rep)
            pred = model.predict(case.test.inputs, np.random.default_rng(0), with_cov=False)
            err = metric_rmse(pred.mean, case.test.outputs)
            scores[(lam, gamma)].append(err)
            print(f"rep {rep} lam {lam:g} gamma {gamma:g}: RMSE {err:.3f} "
                  f"rho {np.round(model.blocks()['rho'], 3)} ({time.perf_counter() - t:.0f}s)",
                  flush=True)
    for (lam, gamma), v in scores.items():
        print(f"lam {lam:g} gamma {gamma:g}: mean RMSE {np.mean(v):.3f} over {len(v)} reps")


if __name__ == "__main__":
    main()
