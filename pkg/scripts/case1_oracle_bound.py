"""Best case for transfer on simulation case 1: exact, noise-free source
functions at the true alignment, least-squares transfer coefficients and a GP
on the remaining discrepancy, compared with the target-only GP.

    python3 scripts/case1_oracle_bound.py --seed 2026 --reps 10
"""

import argparse

import numpy as np

from htgp.baselines import tgp_fit, tgp_predict
from htgp.bench import case_spec, gen_case, metric_rmse, park_s1, park_s2, park_s3
from htgp.dataio import Dataset


def source_features(X, which):
    cols = {0: park_s1(X[:, :2]), 1: park_s2(X[:, :2]), 2: park_s3(X[:, :3])}
    return np.column_stack([cols[j] for j in which] + [np.ones(len(X))])


def oracle_rmse(case, which, seed, rep, restarts, steps):
    X, y = case.target.inputs, case.target.outputs
    F = source_features(X, which)
    coef = np.linalg.lstsq(F, y, rcond=None)[0]
    resid = Dataset(X, y - F @ coef, "target")
    gp = tgp_fit(resid, seed, restarts=restarts, steps=steps, rep=rep)
    Xt = case.test.inputs
    pred = source_features(Xt, which) @ coef + tgp_predict(gp, Xt, with_cov=False).mean
    return metric_rmse(pred, case.test.outputs)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--reps", type=int, default=10)
    ap.add_argument("--restarts", type=int, default=3)
    ap.add_argument("--steps", type=int, default=3000)
    args = ap.parse_args()

    rows = []
    for rep in range(args.reps):
        case = gen_case(case_spec(1), args.seed, rep)
        gp = tgp_fit(case.target, args.seed, restarts=args.restarts, steps=args.steps, rep=rep)
        tgp = metric_rmse(tgp_predict(gp, case.test.inputs, with_cov=False).mean,
                          case.test.outputs)
        s3 = oracle_rmse(case, [2], args.seed, rep, args.restarts, args.steps)
        allsrc = oracle_rmse(case, [0, 1, 2], args.seed, rep, args.restarts, args.steps)
        rows.append((tgp, s3, allsrc))
        print(f"rep {rep}: TGP {tgp:.3f}  oracle S3 {s3:.3f}  oracle S1-S3 {allsrc:.3f}",
              flush=True)
    m = np.mean(rows, axis=0)
    print(f"mean: TGP {m[0]:.3f}  oracle S3 {m[1]:.3f} ({m[1] / m[0]:.2f} x TGP)  "
          f"oracle S1-S3 {m[2]:.3f} ({m[2] / m[0]:.2f} x TGP)")


if __name__ == "__main__":
    main()
