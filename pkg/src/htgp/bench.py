"""Simulation cases, metrics, presets and the repeated-experiment harness."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from .alignnet import ReferenceMapping, imc_reference
from .baselines import imc_fit, imc_predict, tgp_fit, tgp_predict
from .dataio import Dataset, lhs_sample, rng_stream
from .gpcore import PredictiveDistribution, robust_cholesky
from .model import ModelConfig, TransferData, TransferModel
from .objective import ObjectiveConfig
from .training import TrainConfig, select_hyperparams, train, write_trace

TRANSFER_METHODS = ("R2HGP", "HGP", "PhyR-HGP", "SSR-HGP")
ALL_METHODS = TRANSFER_METHODS + ("TGP", "IMC")
IMC_IDENTIFIER = "imc"


# --------------------------------------------------------------------------
# test functions
# --------------------------------------------------------------------------

def park_target(X):
    x1, x2, x3, x4 = (X[:, k] for k in range(4))
    # x1/2 * (sqrt(1 + (x2 + x3^2) x4 / x1^2) - 1), rewritten to stay finite at x1 = 0
    root = 0.5 * (np.sqrt(x1**2 + (x2 + x3**2) * x4) - x1)
    return root + (x1 + 3.0 * x4) * np.exp(1.0 + np.sin(x3))


def park_s1(X):
    return X[:, 0] ** 2 + np.cos(X[:, 1])


def park_s2(X):
    x1, x2 = X[:, 0], X[:, 1]
    half = np.full_like(x1, 0.5)
    f = park_target(np.column_stack([x1, x2, half, half]))
    return (1.0 + 0.1 * np.sin(x1)) * f - 2.0 * x1 + x2**2 + 0.75


def park_s3(X):
    x1, x2, x3 = X[:, 0], X[:, 1], X[:, 2]
    return 0.5 * x1 * (np.sqrt(1.0 + x2 + x3**2) - 1.0) + x1 * np.exp(1.0 + np.sin(x3))


def case2_target(X):
    x1, x2 = X[:, 0], X[:, 1]
    return 0.2 * (x1 - 3.0) ** 3 + 0.15 * x2**2 + np.sin(2.0 * x2)


def case2_s1(X):
    return 0.3 * (X[:, 0] - 3.0) ** 3


def case2_s2(X):
    x = X[:, 0]
    return 0.3 * x**2 + 2.0 * np.sin(2.0 * x)


def case2_s3(X):
    return 1.0 - (X[:, 0] + X[:, 1] - 4.0) ** 2


def case3_target(X):
    r, th, ph = X[:, 0], X[:, 1], X[:, 2]
    h = 0.5 * np.pi
    return (3.5 * r * np.cos(h * ph) + 2.2 * r * np.sin(h * th)
            + 0.85 * np.abs(r * np.cos(h * th) - 2.0 * r * np.sin(h * th)) ** 2.2
            + 2.0 * np.cos(np.pi * ph) / (1.0 + 3.0 * r**2 + 10.0 * th**2))


def case3_s1(X):
    x1, x2 = X[:, 0], X[:, 1]
    return 3.0 * x1 + 2.0 * x2 + 0.7 * np.abs(x1 - 1.7 * x2) ** 2.35


def case3_s2(X):
    u, v = X[:, 0], X[:, 1]
    return np.sin(5.0 * np.pi * u) * np.exp(-v) + 0.3 * u**2 - 0.4 * v**3


def case3_reference(X):
    r, th, ph = X[:, 0], X[:, 1], X[:, 2]
    return np.column_stack([r * np.cos(0.5 * np.pi * ph), r * np.sin(0.5 * np.pi * th)])


# --------------------------------------------------------------------------
# simulation case definitions
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SimCaseSpec:
    case_id: int
    n_target: int
    n_sources: tuple
    noise_std: float
    source_noise_std: float
    target_bounds: tuple          # training region (restricted)
    source_bounds: tuple
    test_axes: tuple              # one 1-D grid per target dimension
    references: tuple             # per source: ("subset", idx) | ("table",) | ("imc",)
    imc_source: int               # 0-based source used by the IMC baseline

    @property
    def n_test(self) -> int:
        return int(np.prod([len(a) for a in self.test_axes]))


_FUNCTIONS = {
    1: (park_target, (park_s1, park_s2, park_s3)),
    2: (case2_target, (case2_s1, case2_s2, case2_s3)),
    3: (case3_target, (case3_s1, case3_s2)),
}


def case_spec(case_id: int, **overrides) -> SimCaseSpec:
    """Canonical sample counts, noise levels, bounds and test grids."""
    if case_id == 1:
        spec = SimCaseSpec(
            1, 50, (80, 80, 80), 0.5, 0.5,
            ((0, 2), (0, 2), (0, 2), (0, 1.6)),
            (((0, 2), (0, 2)), ((0, 2), (0, 2)), ((0, 2), (0, 2), (0, 2))),
            (tuple(np.linspace(0, 2, 6)), tuple(np.linspace(0, 2, 6)),
             tuple(np.linspace(0, 2, 9)), tuple(np.linspace(0, 2, 9))),
            (("subset", (0, 1)), ("subset", (0, 1)), ("subset", (0, 1, 2))),
            2)
    elif case_id == 2:
        axis = tuple(np.round(np.arange(26) * 0.2, 10))
        spec = SimCaseSpec(
            2, 15, (30, 30, 30), 0.2, 0.2,
            ((0, 5), (0, 4)),
            (((0, 5),), ((0, 5),), ((0, 5), (0, 5))),
            (axis, axis),
            (("subset", (0,)), ("subset", (1,)), ("imc",)),
            0)
    elif case_id == 3:
        h = 0.5 * np.pi
        spec = SimCaseSpec(
            3, 10, (30, 30), 0.0, 0.0,
            ((0, 0.8), (0, h), (0, h)),
            (((0, 1), (0, 1)), ((0, 1), (0, 1))),
            (tuple(np.linspace(0, 1, 5)), tuple(np.linspace(0, h, 10)),
             tuple(np.linspace(0, h, 10))),
            (("table",), ("imc",)),
            0)
    else:
        raise ValueError(f"unknown simulation case {case_id!r}; expected 1, 2 or 3")
    return replace(spec, **overrides) if overrides else spec


@dataclass
class CaseData:
    sources: list
    target: Dataset
    test: Dataset
    references: list              # ReferenceMapping, or IMC_IDENTIFIER to be resolved
    imc_source: int = 0


def grid_points(axes) -> np.ndarray:
    mesh = np.meshgrid(*[np.asarray(a, dtype=float) for a in axes], indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def gen_case(spec: SimCaseSpec, seed: int, rep: int = 0) -> CaseData:
    if spec.case_id not in _FUNCTIONS:
        raise ValueError(f"unknown simulation case {spec.case_id!r}")
    f_T, f_S = _FUNCTIONS[spec.case_id]
    tag = f"case{spec.case_id}"
    X_T = lhs_sample(spec.n_target, spec.target_bounds, rng_stream(seed, f"{tag}-target-x", rep))
    noise = rng_stream(seed, f"{tag}-target-noise", rep)
    y_T = f_T(X_T) + spec.noise_std * noise.standard_normal(spec.n_target)
    target = Dataset(X_T, y_T, "target")
    sources = []
    for j, (f, n, bounds) in enumerate(zip(f_S, spec.n_sources, spec.source_bounds)):
        X = lhs_sample(n, bounds, rng_stream(seed, f"{tag}-source{j}-x", rep))
        e = rng_stream(seed, f"{tag}-source{j}-noise", rep).standard_normal(n)
        sources.append(Dataset(X, f(X) + spec.source_noise_std * e, f"S{j + 1}"))
    X_test = grid_points(spec.test_axes)
    test = Dataset(X_test, f_T(X_test), "test")
    refs = []
    for ref in spec.references:
        if ref[0] == "subset":
            refs.append(ReferenceMapping.subset(ref[1], target.d))
        elif ref[0] == "table":
            refs.append(ReferenceMapping.from_table(case3_reference(X_T)))
        else:
            refs.append(IMC_IDENTIFIER)
    return CaseData(sources, target, test, refs, spec.imc_source)


@dataclass
class DatasetCase:
    """User-supplied data: sources, a target pool and train/test splits of it."""

    sources: list
    target: Dataset
    references: list
    splits: list                   # (train_idx, test_idx) pairs, one per repetition
    imc_source: int = 0
    name: str = "dataset"

    def generate(self, rep: int) -> CaseData:
        tr, te = self.splits[rep % len(self.splits)]
        refs = [r.rows(tr) if isinstance(r, ReferenceMapping) else r for r in self.references]
        return CaseData(self.sources, self.target.subset(tr), self.target.subset(te), refs,
                        self.imc_source)


def mc_cv_splits(n: int, test_fraction: float = 0.2, n_splits: int = 30, seed: int = 0):
    """Monte Carlo cross-validation: independent random train/test partitions."""
    n_test = int(round(test_fraction * n))
    if not 1 <= n_test < n:
        raise ValueError(f"test fraction {test_fraction} leaves no train or test points for n={n}")
    out = []
    for k in range(n_splits):
        perm = rng_stream(seed, "mc-cv", k).permutation(n)
        out.append((np.sort(perm[n_test:]), np.sort(perm[:n_test])))
    return out


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def metric_rmse(preds, truths) -> float:
    preds, truths = np.asarray(preds, dtype=float), np.asarray(truths, dtype=float)
    if preds.shape != truths.shape:
        raise ValueError("prediction and truth lengths differ")
    return float(np.sqrt(np.mean((preds - truths) ** 2)))


def metric_r2(preds, truths) -> float:
    preds, truths = np.asarray(preds, dtype=float), np.asarray(truths, dtype=float)
    if preds.shape != truths.shape:
        raise ValueError("prediction and truth lengths differ")
    ss_tot = float(np.sum((truths - truths.mean()) ** 2))
    return 1.0 - float(np.sum((truths - preds) ** 2)) / ss_tot


def metric_mnll(pred: PredictiveDistribution, truths) -> float:
    """Joint Gaussian negative log-density of the test outputs, per test point."""
    y = np.asarray(truths, dtype=float)
    n = y.shape[0]
    if pred.mean.shape != (n,) or pred.cov.shape != (n, n):
        raise ValueError("predictive distribution does not match the number of truths")
    L, _ = robust_cholesky(0.5 * (pred.cov + pred.cov.T))
    a = solve_triangular(L, y - pred.mean, lower=True)
    return float(0.5 * (a @ a + 2.0 * np.log(np.diag(L)).sum() + n * np.log(2.0 * np.pi)) / n)


# --------------------------------------------------------------------------
# presets and the harness
# --------------------------------------------------------------------------

@dataclass
class BenchConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    lam: float = 0.1
    gamma: float = 0.1
    cv: bool = False
    lam_grid: tuple = (0.0, 0.01, 0.1, 1.0)
    gamma_grid: tuple = (0.0, 0.01, 0.1, 1.0)
    folds: int = 5
    tgp_restarts: int = 3
    tgp_steps: int = 3000
    imc_restarts: int = 8
    imc_steps: int = 2000
    imc_bias_correction: bool = True
    repetitions: int = 10


def preset(name: str) -> BenchConfig:
    if name == "paper":
        return BenchConfig(cv=True, repetitions=30)
    if name == "desk":
        return BenchConfig(
            model=ModelConfig(K=10, W=10, init_recog_logvar=-6.0, init_prior_at_reference=True),
            train=TrainConfig(epochs=3000),
            lam=1.0, gamma=0.1, repetitions=10,
        )
    raise ValueError(f"unknown preset {name!r}; expected 'desk' or 'paper'")


def method_weights(method: str, cfg: BenchConfig):
    """(lam, gamma) candidate grids for a transfer variant."""
    if method == "HGP":
        return (0.0,), (0.0,)
    lams = tuple(cfg.lam_grid) if cfg.cv else (cfg.lam,)
    gams = tuple(cfg.gamma_grid) if cfg.cv else (cfg.gamma,)
    if method == "PhyR-HGP":
        return lams, (0.0,)
    if method == "SSR-HGP":
        return (0.0,), gams
    if method == "R2HGP":
        return lams, gams
    raise ValueError(f"not a transfer variant: {method!r}")


def resolve_references(case: CaseData, seed: int, rep: int, cfg: BenchConfig) -> list:
    refs = []
    for j, ref in enumerate(case.references):
        if isinstance(ref, ReferenceMapping) or ref is None:
            refs.append(ref)
            continue
        surrogate = tgp_fit(case.sources[j], seed, restarts=cfg.tgp_restarts,
                            steps=cfg.tgp_steps, rep=rep * 100 + j)
        mapping, _ = imc_reference(case.target, case.sources[j], surrogate,
                                   rng_stream(seed, f"imc-reference-{j}", rep),
                                   restarts=cfg.imc_restarts, steps=cfg.imc_steps)
        refs.append(mapping)
    return refs


def fit_transfer(method: str, case: CaseData, refs, cfg: BenchConfig, seed: int, rep: int,
                 trace_path=None) -> TransferModel:
    data = TransferData(case.sources, case.target, refs)
    lams, gams = method_weights(method, cfg)
    lam, gamma = select_hyperparams(data, lams, gams, cfg.folds, seed, cfg.model,
                                    cfg.objective, cfg.train, rep=rep)
    model = TransferModel(data, cfg.model)
    res = train(model, replace(cfg.objective, lam=lam, gamma=gamma), cfg.train, seed, rep=rep)
    if trace_path is not None:
        write_trace(trace_path, res.trace)
    return model


def _evaluate(pred: PredictiveDistribution, test: Dataset) -> dict:
    return {"rmse": metric_rmse(pred.mean, test.outputs),
            "r2": metric_r2(pred.mean, test.outputs),
            "mnll": metric_mnll(pred, test.outputs)}


def run_repetition(case: CaseData, methods, cfg: BenchConfig, seed: int, rep: int,
                   trace_dir=None) -> dict:
    """Metrics (or an error string) for each method on one data draw."""
    out = {}
    refs = None
    for method in methods:
        try:
            if method in TRANSFER_METHODS:
                if refs is None:
                    refs = resolve_references(case, seed, rep, cfg)
                trace = None if trace_dir is None else Path(trace_dir) / f"{method}_rep{rep}.csv"
                model = fit_transfer(method, case, refs, cfg, seed, rep, trace)
                pred = model.predict(case.test.inputs, rng_stream(seed, "predict", rep))
                res = _evaluate(pred, case.test)
                res["rho"] = model.blocks()["rho"].tolist()
            elif method == "TGP":
                gp = tgp_fit(case.target, seed, restarts=cfg.tgp_restarts, steps=cfg.tgp_steps,
                             rep=rep)
                res = _evaluate(tgp_predict(gp, case.test.inputs), case.test)
            elif method == "IMC":
                j = case.imc_source
                sur = tgp_fit(case.sources[j], seed, restarts=cfg.tgp_restarts,
                              steps=cfg.tgp_steps, rep=rep * 100 + j)
                im = imc_fit(case.target, case.sources[j], seed, cfg.imc_bias_correction,
                             cfg.imc_restarts, cfg.imc_steps, rep=rep, surrogate=sur)
                res = _evaluate(imc_predict(im, case.test.inputs), case.test)
            else:
                raise ValueError(f"unknown method {method!r}")
            if not all(np.isfinite(res[k]) for k in ("rmse", "r2", "mnll")):
                raise FloatingPointError(f"non-finite metrics {res}")
        except (FloatingPointError, np.linalg.LinAlgError) as exc:
            res = {"error": f"{type(exc).__name__}: {exc}"}
        out[method] = res
    return out


def _summary(values) -> dict:
    ok = [v for v in values if v is not None]
    if not ok:
        return {"mean": None, "std": None, "per_rep": list(values)}
    return {"mean": float(np.mean(ok)), "std": float(np.std(ok)), "per_rep": list(values)}


def aggregate(per_rep: list, methods, case_name: str, seed: int) -> dict:
    report = {"case": case_name, "seed": int(seed), "repetitions": len(per_rep), "methods": {}}
    for m in methods:
        rows = [r[m] for r in per_rep]
        entry = {}
        for metric in ("rmse", "r2", "mnll"):
            entry[metric] = _summary([r.get(metric) for r in rows])
        if m == "R2HGP":
            entry["rho"] = [r.get("rho") for r in rows]
        failures = [{"rep": i, "error": r["error"]} for i, r in enumerate(rows) if "error" in r]
        if failures:
            entry["failures"] = failures
        report["methods"][m] = entry
    return report


def run_benchmark(case, methods, repetitions: int, seed: int, cfg: BenchConfig | None = None,
                  trace_dir=None) -> dict:
    """Repeat data generation, fitting and evaluation; returns the results dict.

    ``case`` is a :class:`SimCaseSpec` or a :class:`DatasetCase`.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    cfg = cfg or BenchConfig()
    methods = list(methods)
    for m in methods:
        if m not in ALL_METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {ALL_METHODS}")
    per_rep = []
    for rep in range(repetitions):
        if isinstance(case, SimCaseSpec):
            data = gen_case(case, seed, rep)
        else:
            data = case.generate(rep)
        per_rep.append(run_repetition(data, methods, cfg, seed, rep, trace_dir))
    name = f"case{case.case_id}" if isinstance(case, SimCaseSpec) else case.name
    return aggregate(per_rep, methods, name, seed)
