"""Command-line front end.

Commands: simulate, train, predict, benchmark, ablate. Settings are resolved
as preset defaults < config file < command-line flags. Exit codes: 0 success,
2 configuration/input error, 3 numerical failure, 4 unreadable model file.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import jsonschema
import numpy as np

from . import bench
from .alignnet import ReferenceMapping
from .dataio import (
    Dataset, ParseError, load_csv, load_inputs_csv, rng_stream, write_csv, write_results_json,
)
from .model import TransferData, TransferModel
from .training import TrainingError, select_hyperparams, train, write_trace

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MODEL = 0, 2, 3, 4
MODEL_FORMAT = "htgp-model"

_num = {"type": "number"}
_posint = {"type": "integer", "minimum": 1}
_nonneg = {"type": "number", "minimum": 0}

_REFERENCE = {
    "oneOf": [
        {"type": "null"},
        {"type": "object", "additionalProperties": False, "required": ["type"],
         "properties": {"type": {"const": "imc"}}},
        {"type": "object", "additionalProperties": False, "required": ["type", "indices"],
         "properties": {"type": {"const": "subset"},
                        "indices": {"type": "array", "items": {"type": "integer", "minimum": 0}}}},
        {"type": "object", "additionalProperties": False, "required": ["type", "matrix"],
         "properties": {"type": {"const": "affine"},
                        "matrix": {"type": "array", "items": {"type": "array", "items": _num}},
                        "offset": {"type": "array", "items": _num}}},
        {"type": "object", "additionalProperties": False, "required": ["type", "values"],
         "properties": {"type": {"const": "table"},
                        "values": {"type": "array", "items": {"type": "array", "items": _num}}}},
    ]
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "preset": {"enum": ["desk", "paper"]},
        "case": {"enum": [1, 2, 3]},
        "case_overrides": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "n_target": _posint,
                "n_sources": {"type": "array", "items": _posint},
                "noise_std": _nonneg,
                "source_noise_std": _nonneg,
                "test_axes": {"type": "array", "items": {"type": "array", "items": _num,
                                                         "minItems": 1}},
                "imc_source": {"type": "integer", "minimum": 0},
            },
        },
        "repetition": {"type": "integer", "minimum": 0},
        "data": {
            "type": "object", "additionalProperties": False,
            "required": ["sources", "target"],
            "properties": {
                "sources": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "target": {"type": "string"},
                "test": {"type": "string"},
                "references": {"type": "array", "items": _REFERENCE},
                "imc_source": {"type": "integer", "minimum": 0},
                "splits": {"type": "object", "additionalProperties": False,
                           "properties": {"n_splits": _posint,
                                          "test_fraction": {"type": "number",
                                                            "exclusiveMinimum": 0,
                                                            "exclusiveMaximum": 1}}},
                "name": {"type": "string"},
            },
        },
        "methods": {"type": "array", "items": {"enum": list(bench.ALL_METHODS)}, "minItems": 1},
        "repetitions": _posint,
        "model": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "hidden": _posint, "activation": {"enum": ["identity", "tanh"]},
                "alpha": {"oneOf": [_num, {"type": "array", "items": _num}]},
                "init_weight_std": _nonneg, "init_prior_logvar": _num,
                "init_recog_logvar": _num, "noise_init_floor": _nonneg, "K": _posint, "W": _posint,
                "init_prior_at_reference": {"type": "boolean"},
            },
        },
        "objective": {
            "type": "object", "additionalProperties": False,
            "properties": {"mu": _num, "beta": _num, "L": _posint, "M": _posint},
        },
        "train": {
            "type": "object", "additionalProperties": False,
            "properties": {"epochs": {"type": "integer", "minimum": 0},
                           "lr": {"type": "number", "exclusiveMinimum": 0},
                           "smooth_window": _posint, "max_bad_steps": _posint},
        },
        "lam": _nonneg,
        "gamma": _nonneg,
        "cv": {"type": "boolean"},
        "lam_grid": {"type": "array", "items": _nonneg, "minItems": 1},
        "gamma_grid": {"type": "array", "items": _nonneg, "minItems": 1},
        "folds": {"type": "integer", "minimum": 2},
        "tgp": {"type": "object", "additionalProperties": False,
                "properties": {"restarts": _posint, "steps": _posint}},
        "imc": {"type": "object", "additionalProperties": False,
                "properties": {"restarts": _posint, "steps": _posint,
                               "bias_correction": {"type": "boolean"}}},
        "out": {"type": "string"},
    },
    "not": {"required": ["case", "data"]},
}


class ConfigError(ValueError):
    pass


class ModelFileError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def parse_config(text: str, source: str = "<config>") -> dict:
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: invalid JSON ({exc})") from None
    validate_config(cfg, source)
    return cfg


def validate_config(cfg, source: str = "<config>") -> None:
    errors = sorted(jsonschema.Draft202012Validator(CONFIG_SCHEMA).iter_errors(cfg),
                    key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{source}: {where}: {e.message}")


def serialize_config(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), str(p))


def merge_flags(cfg: dict, args) -> dict:
    """Command-line flags take precedence over the config file."""
    cfg = dict(cfg)
    for key in ("seed", "preset", "out"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "methods", None):
        cfg["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if getattr(args, "case", None) is not None:
        cfg.pop("data", None)
        cfg["case"] = args.case
    validate_config(cfg, "command line")
    return cfg


def bench_config(cfg: dict) -> bench.BenchConfig:
    base = bench.preset(cfg.get("preset", "desk"))
    model = replace(base.model, **cfg.get("model", {}))
    objective = replace(base.objective, **cfg.get("objective", {}))
    train_cfg = replace(base.train, **cfg.get("train", {}))
    kw = {k: cfg[k] for k in ("lam", "gamma", "cv", "folds", "repetitions") if k in cfg}
    for k in ("lam_grid", "gamma_grid"):
        if k in cfg:
            kw[k] = tuple(cfg[k])
    tgp, imc = cfg.get("tgp", {}), cfg.get("imc", {})
    if "restarts" in tgp:
        kw["tgp_restarts"] = tgp["restarts"]
    if "steps" in tgp:
        kw["tgp_steps"] = tgp["steps"]
    if "restarts" in imc:
        kw["imc_restarts"] = imc["restarts"]
    if "steps" in imc:
        kw["imc_steps"] = imc["steps"]
    if "bias_correction" in imc:
        kw["imc_bias_correction"] = imc["bias_correction"]
    return replace(base, model=model, objective=objective, train=train_cfg, **kw)


def _case_spec(cfg: dict) -> bench.SimCaseSpec:
    over = dict(cfg.get("case_overrides", {}))
    if "n_sources" in over:
        over["n_sources"] = tuple(over["n_sources"])
    if "test_axes" in over:
        over["test_axes"] = tuple(tuple(a) for a in over["test_axes"])
    spec = bench.case_spec(cfg["case"], **over)
    if len(spec.n_sources) != len(spec.source_bounds):
        raise ConfigError(f"case {spec.case_id} has {len(spec.source_bounds)} sources, "
                          f"n_sources lists {len(spec.n_sources)}")
    if len(spec.test_axes) != len(spec.target_bounds):
        raise ConfigError(f"test_axes needs one axis per target dimension "
                          f"({len(spec.target_bounds)})")
    return spec


def _reference(entry, d_T: int):
    if entry is None:
        return None
    if entry["type"] == "imc":
        return bench.IMC_IDENTIFIER
    return ReferenceMapping.from_dict(entry, d_T)


def _load_data(cfg: dict):
    """Sources, target pool, optional test set and references from CSV paths."""
    spec = cfg["data"]
    try:
        sources = [load_csv(p, f"S{j + 1}") for j, p in enumerate(spec["sources"])]
        target = load_csv(spec["target"], "target")
        test = load_csv(spec["test"], "test") if "test" in spec else None
    except FileNotFoundError as exc:
        raise ConfigError(f"data file not found: {exc.filename}") from None
    except ParseError as exc:
        raise ConfigError(str(exc)) from None
    refs = spec.get("references", [None] * len(sources))
    if len(refs) != len(sources):
        raise ConfigError("data.references needs one entry per source")
    refs = [_reference(r, target.d) for r in refs]
    if test is not None and test.d != target.d:
        raise ConfigError("test inputs have a different dimension from the target")
    return sources, target, test, refs


def _dataset_case(cfg: dict, seed: int) -> bench.DatasetCase:
    sources, target, test, refs = _load_data(cfg)
    spec = cfg["data"]
    imc_source = spec.get("imc_source", 0)
    if imc_source >= len(sources):
        raise ConfigError(f"data.imc_source {imc_source} out of range")
    if test is not None:
        pool = Dataset(np.vstack([target.inputs, test.inputs]),
                       np.concatenate([target.outputs, test.outputs]), "target")
        split = (np.arange(target.n), np.arange(target.n, pool.n))
        return bench.DatasetCase(sources, pool, refs, [split], imc_source,
                                 spec.get("name", "dataset"))
    sp = spec.get("splits", {})
    try:
        splits = bench.mc_cv_splits(target.n, sp.get("test_fraction", 0.2),
                                    sp.get("n_splits", 30), seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return bench.DatasetCase(sources, target, refs, splits, imc_source, spec.get("name", "dataset"))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _out_dir(cfg: dict, default: str) -> Path:
    return Path(cfg.get("out", default))


def cmd_simulate(cfg: dict) -> int:
    if "case" not in cfg:
        raise ConfigError("simulate needs a simulation case (--case or config 'case')")
    seed = cfg.get("seed", 0)
    rep = cfg.get("repetition", 0)
    case = bench.gen_case(_case_spec(cfg), seed, rep)
    out = _out_dir(cfg, "simulated")
    paths = []
    for j, src in enumerate(case.sources):
        write_csv(out / f"source{j + 1}.csv", src)
        paths.append(str(out / f"source{j + 1}.csv"))
    write_csv(out / "target.csv", case.target)
    write_csv(out / "test.csv", case.test)
    refs = [{"type": "imc"} if r == bench.IMC_IDENTIFIER else r.to_dict() for r in case.references]
    data_cfg = {"data": {"sources": paths, "target": str(out / "target.csv"),
                         "test": str(out / "test.csv"), "references": refs,
                         "imc_source": case.imc_source, "name": f"case{cfg['case']}"}}
    (out / "data_config.json").write_text(serialize_config(data_cfg), encoding="utf-8")
    print(f"wrote case {cfg['case']} (seed {seed}, repetition {rep}) to {out}")
    return EXIT_OK


def _training_problem(cfg: dict, seed: int, bcfg: bench.BenchConfig):
    if "data" in cfg:
        sources, target, _, refs = _load_data(cfg)
        imc_source = cfg["data"].get("imc_source", 0)
        case = bench.CaseData(sources, target, target, refs, imc_source)
        rep = 0
    elif "case" in cfg:
        rep = cfg.get("repetition", 0)
        case = bench.gen_case(_case_spec(cfg), seed, rep)
    else:
        raise ConfigError("config needs either 'case' or 'data'")
    refs = bench.resolve_references(case, seed, rep, bcfg)
    return TransferData(case.sources, case.target, refs), rep


def fit_model(cfg: dict):
    """The R2HGP fit behind ``train``; returns ``(model, train_result)``."""
    seed = cfg.get("seed", 0)
    bcfg = bench_config(cfg)
    data, rep = _training_problem(cfg, seed, bcfg)
    lams, gams = bench.method_weights("R2HGP", bcfg)
    lam, gamma = select_hyperparams(data, lams, gams, bcfg.folds, seed, bcfg.model,
                                    bcfg.objective, bcfg.train, rep=rep)
    model = TransferModel(data, bcfg.model)
    res = train(model, replace(bcfg.objective, lam=lam, gamma=gamma), bcfg.train, seed, rep=rep)
    return model, res


def cmd_train(cfg: dict) -> int:
    model, res = fit_model(cfg)
    out = _out_dir(cfg, "model")
    out.mkdir(parents=True, exist_ok=True)
    envelope = {"format": MODEL_FORMAT, "model": model.to_dict()}
    (out / "model.json").write_text(json.dumps(envelope) + "\n", encoding="utf-8")
    write_trace(out / "trace.csv", res.trace)
    rho = ", ".join(f"{r:.4g}" for r in model.blocks()["rho"])
    print(f"trained R2HGP (best epoch {res.best_epoch}, rho = [{rho}]); wrote {out / 'model.json'}")
    return EXIT_OK


def load_model(path) -> TransferModel:
    p = Path(path)
    try:
        envelope = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ModelFileError(f"model file not found: {p}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFileError(f"{p}: not a model file ({exc})") from None
    if not isinstance(envelope, dict) or envelope.get("format") != MODEL_FORMAT:
        raise ModelFileError(f"{p}: not a model file")
    try:
        return TransferModel.from_dict(envelope["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"{p}: {exc}") from None


def predict_rng(seed: int) -> np.random.Generator:
    return rng_stream(seed, "predict", 0)


def cmd_predict(model_path, inputs_path, out_path, seed: int) -> int:
    model = load_model(model_path)
    try:
        X, _ = load_inputs_csv(inputs_path)
    except FileNotFoundError:
        raise ConfigError(f"input file not found: {inputs_path}") from None
    except ParseError as exc:
        raise ConfigError(f"{inputs_path}: {exc}") from None
    if X.shape[1] != model.d_T:
        raise ConfigError(f"inputs have {X.shape[1]} columns, model expects {model.d_T}")
    pred = model.predict(X, predict_rng(seed))
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_suffix(out.suffix + ".tmp")
    with tmp.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{k + 1}" for k in range(X.shape[1])] + ["mean", "std"])
        for x, m, s in zip(X, pred.mean, pred.std):
            w.writerow([repr(float(v)) for v in x] + [repr(float(m)), repr(float(s))])
    tmp.replace(out)
    print(f"wrote {len(X)} predictions to {out}")
    return EXIT_OK


def _run(cfg: dict, methods) -> int:
    seed = cfg.get("seed", 0)
    bcfg = bench_config(cfg)
    if "data" in cfg:
        case = _dataset_case(cfg, seed)
    elif "case" in cfg:
        case = _case_spec(cfg)
    else:
        raise ConfigError("config needs either 'case' or 'data'")
    out = _out_dir(cfg, "results")
    report = bench.run_benchmark(case, methods, bcfg.repetitions, seed, bcfg,
                                 trace_dir=out / "traces")
    write_results_json(out / "results.json", report)
    for m in methods:
        entry = report["methods"][m]
        r = entry["rmse"]
        if r["mean"] is None:
            print(f"{m:9s} all repetitions failed")
        else:
            print(f"{m:9s} RMSE {r['mean']:.4f} +/- {r['std']:.4f}  R2 {entry['r2']['mean']:.4f}")
    print(f"wrote {out / 'results.json'}")
    dead = [m for m in methods if report["methods"][m]["rmse"]["mean"] is None]
    if dead:
        print(f"numerical failure on every repetition for: {', '.join(dead)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_benchmark(cfg: dict) -> int:
    return _run(cfg, cfg.get("methods", ["R2HGP", "TGP", "IMC"]))


def cmd_ablate(cfg: dict) -> int:
    return _run(cfg, cfg.get("methods", list(bench.TRANSFER_METHODS)))


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="htgp", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, methods=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--preset", choices=("desk", "paper"), help="budget preset")
        p.add_argument("--case", type=int, choices=(1, 2, 3), help="simulation case")
        if methods:
            p.add_argument("--methods", help="comma-separated method names")

    common(sub.add_parser("simulate", help="write a simulated case as CSV files"))
    common(sub.add_parser("train", help="fit R2HGP and save the model"))
    pp = sub.add_parser("predict", help="predict with a saved model")
    pp.add_argument("--model", required=True, help="model.json written by train")
    pp.add_argument("--inputs", required=True, help="CSV with columns x1..xd")
    pp.add_argument("--out", required=True, help="output CSV path")
    pp.add_argument("--seed", type=int, default=0, help="Monte Carlo seed")
    common(sub.add_parser("benchmark", help="repeated comparison of methods"), methods=True)
    common(sub.add_parser("ablate", help="regularizer ablation of the transfer model"),
           methods=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "predict":
            return cmd_predict(args.model, args.inputs, args.out, args.seed)
        cfg = merge_flags(load_config(args.config), args)
        handler = {"simulate": cmd_simulate, "train": cmd_train,
                   "benchmark": cmd_benchmark, "ablate": cmd_ablate}[args.command]
        return handler(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelFileError as exc:
        print(f"model file error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (TrainingError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
