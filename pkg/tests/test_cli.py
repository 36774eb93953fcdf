import csv
import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from htgp import bench, cli
from htgp.dataio import load_csv

RESULTS_SCHEMA = {
    "type": "object",
    "required": ["case", "seed", "repetitions", "methods"],
    "properties": {
        "case": {"type": "string"},
        "seed": {"type": "integer"},
        "repetitions": {"type": "integer", "minimum": 1},
        "methods": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["rmse", "r2", "mnll"],
                "properties": {
                    m: {"type": "object", "required": ["mean", "std", "per_rep"],
                        "properties": {"mean": {"type": ["number", "null"]},
                                       "std": {"type": ["number", "null"]},
                                       "per_rep": {"type": "array"}}}
                    for m in ("rmse", "r2", "mnll")
                } | {"rho": {"type": "array"}},
            },
        },
    },
}

TINY = {
    "case": 2,
    "case_overrides": {"n_target": 6, "n_sources": [8, 8, 8],
                       "test_axes": [[0.0, 2.5, 5.0], [0.0, 2.0, 4.0]]},
    "repetitions": 1,
    "model": {"hidden": 4, "K": 2, "W": 2},
    "train": {"epochs": 5},
    "tgp": {"restarts": 1, "steps": 20},
    "imc": {"restarts": 1, "steps": 20},
}


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_missing_config_file(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert cli.main(["benchmark", "--config", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


@pytest.mark.parametrize("cfg", [
    {"seed": 1, "bogus": 2},
    {"model": {"hidden": 4, "depth": 3}},
    {"case": 5},
    {"case": 2, "data": {"sources": ["a.csv"], "target": "b.csv"}},
    {"methods": ["GPR"]},
    {"train": {"epochs": -1}},
])
def test_schema_rejects_invalid_configs(tmp_path, cfg):
    assert cli.main(["benchmark", "--config", write_cfg(tmp_path, cfg)]) == 2


def test_invalid_json(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text("{seed: 1")
    assert cli.main(["train", "--config", str(p)]) == 2


configs = st.fixed_dictionaries({}, optional={
    "seed": st.integers(0, 2**31),
    "preset": st.sampled_from(["desk", "paper"]),
    "case": st.sampled_from([1, 2, 3]),
    "methods": st.lists(st.sampled_from(bench.ALL_METHODS), min_size=1, max_size=3),
    "lam": st.floats(0, 10),
    "gamma": st.floats(0, 10),
    "model": st.fixed_dictionaries({}, optional={"hidden": st.integers(1, 64),
                                                 "K": st.integers(1, 50),
                                                 "activation": st.sampled_from(["identity",
                                                                                "tanh"])}),
    "train": st.fixed_dictionaries({}, optional={"epochs": st.integers(0, 10000),
                                                 "lr": st.floats(1e-6, 1)}),
})


@settings(max_examples=60, deadline=None)
@given(configs)
def test_config_round_trip(cfg):
    text = cli.serialize_config(cfg)
    parsed = cli.parse_config(text)
    assert parsed == cfg
    assert cli.parse_config(cli.serialize_config(parsed)) == parsed


def test_flags_override_config(tmp_path):
    args = cli.build_parser().parse_args(["benchmark", "--seed", "9", "--methods", "TGP,IMC",
                                          "--preset", "paper"])
    cfg = cli.merge_flags({"seed": 1, "methods": ["R2HGP"], "preset": "desk"}, args)
    assert cfg["seed"] == 9 and cfg["methods"] == ["TGP", "IMC"] and cfg["preset"] == "paper"
    b = cli.bench_config({"preset": "desk", "lam": 2.0, "train": {"epochs": 7},
                          "imc": {"bias_correction": False}})
    assert b.lam == 2.0 and b.train.epochs == 7 and not b.imc_bias_correction
    assert b.train.lr == 2e-3


def test_benchmark_writes_valid_results(tmp_path):
    out = tmp_path / "res"
    cfg = dict(TINY, methods=["R2HGP", "TGP", "IMC"])
    code = cli.main(["benchmark", "--config", write_cfg(tmp_path, cfg), "--out", str(out),
                     "--seed", "4"])
    assert code == 0
    res = json.loads((out / "results.json").read_text())
    jsonschema.validate(res, RESULTS_SCHEMA)
    assert res["seed"] == 4
    trace = (out / "traces" / "R2HGP_rep0.csv").read_text().splitlines()
    assert trace[0] == "epoch,total,rec,kl,phyr,ssr" and len(trace) == 6


def test_benchmark_is_idempotent(tmp_path):
    cfg = dict(TINY, methods=["TGP", "R2HGP"])
    p = write_cfg(tmp_path, cfg)
    assert cli.main(["benchmark", "--config", p, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["benchmark", "--config", p, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "results.json").read_bytes() == \
        (tmp_path / "b" / "results.json").read_bytes()


def test_all_failed_repetitions_exit_3(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise FloatingPointError("diverged")

    monkeypatch.setattr(bench, "tgp_fit", boom)
    cfg = dict(TINY, methods=["TGP"])
    assert cli.main(["benchmark", "--config", write_cfg(tmp_path, cfg),
                     "--out", str(tmp_path / "r")]) == 3
    res = json.loads((tmp_path / "r" / "results.json").read_text())
    assert res["methods"]["TGP"]["failures"][0]["error"].startswith("FloatingPointError")


def test_ablate_default_methods(tmp_path):
    cfg = dict(TINY)
    assert cli.main(["ablate", "--config", write_cfg(tmp_path, cfg),
                     "--out", str(tmp_path / "r")]) == 0
    res = json.loads((tmp_path / "r" / "results.json").read_text())
    assert sorted(res["methods"]) == sorted(bench.TRANSFER_METHODS)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    sim = tmp / "sim"
    cfg = dict(TINY, seed=2)
    cfg_path = tmp / "sim.json"
    cfg_path.write_text(json.dumps(cfg))
    assert cli.main(["simulate", "--config", str(cfg_path), "--out", str(sim)]) == 0
    data_cfg = json.loads((sim / "data_config.json").read_text())
    train_cfg = {"seed": 2, "model": TINY["model"], "train": {"epochs": 8},
                 "tgp": TINY["tgp"], "imc": TINY["imc"]} | data_cfg
    train_path = tmp / "train.json"
    train_path.write_text(json.dumps(train_cfg))
    assert cli.main(["train", "--config", str(train_path), "--out", str(tmp / "model")]) == 0
    return tmp, sim, train_cfg


def test_simulate_outputs(trained):
    _, sim, _ = trained
    case = bench.gen_case(bench.case_spec(2, n_target=6, n_sources=(8, 8, 8),
                                          test_axes=((0.0, 2.5, 5.0), (0.0, 2.0, 4.0))), 2)
    t = load_csv(sim / "target.csv")
    np.testing.assert_array_equal(t.inputs, case.target.inputs)
    np.testing.assert_array_equal(t.outputs, case.target.outputs)
    assert load_csv(sim / "source3.csv").d == 2


def _read_pred(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


def test_train_predict_round_trip_is_bitwise(trained):
    tmp, sim, train_cfg = trained
    out = tmp / "pred.csv"
    assert cli.main(["predict", "--model", str(tmp / "model" / "model.json"),
                     "--inputs", str(sim / "test.csv"), "--out", str(out), "--seed", "5"]) == 0
    header, arr = _read_pred(out)
    assert header == ["x1", "x2", "mean", "std"]
    model, _ = cli.fit_model(train_cfg)
    X = load_csv(sim / "test.csv").inputs
    ref = model.predict(X, cli.predict_rng(5))
    assert np.array_equal(arr[:, 2], ref.mean)
    assert np.array_equal(arr[:, 3], ref.std)
    # predictions are on the raw output scale: undo the standardization by hand
    from htgp.gpcore import mc_predict
    st_ = model.target_state
    raw = mc_predict(model, st_.inputs_to_unit(X), model.config.K, model.config.W,
                     cli.predict_rng(5))
    np.testing.assert_allclose(arr[:, 2], st_.output_mean + st_.output_std * raw.mean,
                               rtol=1e-12)
    np.testing.assert_allclose(arr[:, 3], st_.output_std * raw.std, rtol=1e-10)


def test_predict_rejects_bad_model_files(trained, tmp_path):
    tmp, sim, _ = trained
    bad = tmp_path / "bad.json"
    bad.write_text('{"format": "htgp-model", "model": {"version": 1')
    out = tmp_path / "p.csv"
    args = ["predict", "--model", str(bad), "--inputs", str(sim / "test.csv"), "--out", str(out)]
    assert cli.main(args) == 4
    assert not out.exists()
    env = json.loads((tmp / "model" / "model.json").read_text())
    env["model"]["version"] = 0
    bad.write_text(json.dumps(env))
    assert cli.main(args) == 4
    assert not out.exists()
    assert cli.main(["predict", "--model", str(tmp_path / "missing.json"), "--inputs",
                     str(sim / "test.csv"), "--out", str(out)]) == 4


def test_predict_rejects_wrong_input_width(trained, tmp_path):
    tmp, _, _ = trained
    p = tmp_path / "x.csv"
    p.write_text("x1\n0.5\n")
    assert cli.main(["predict", "--model", str(tmp / "model" / "model.json"), "--inputs", str(p),
                     "--out", str(tmp_path / "o.csv")]) == 2
