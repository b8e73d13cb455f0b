import csv
import json

import numpy as np
import pytest

from reworkpolicy import pipeline
from reworkpolicy.cli import main

FAST = {
    "simulate": {"n": 800, "effect_fn": "linear", "seed": 3},
    "learners": {"g": {"family": "linear"}, "m": {"family": "logistic"}},
    "bootstrap_draws": 100,
    "region_grid_size": 10,
}


def write_config(tmp_path, name="cfg.json", **overrides):
    doc = json.loads(json.dumps(FAST))
    doc.update(overrides)
    doc["out"] = str(tmp_path / "out")
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def run_all(path, out=None):
    extra = ["--out", str(out)] if out else []
    for cmd in ("simulate", "fit", "cate", "policy", "report"):
        assert main([cmd, "--config", str(path)] + extra) == 0, cmd


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestSimulate:
    def test_constant_oracle(self, tmp_path):
        cfg = write_config(tmp_path, simulate={"n": 300, "effect_fn": "constant", "effect_params": {"value": 0.25}})
        assert main(["simulate", "--config", str(cfg)]) == 0
        oracle = json.loads((tmp_path / "out" / "oracle.json").read_text())
        assert oracle["theta_ate"] == 0.25
        assert len(read_csv(tmp_path / "out" / "data.csv")) == 301

    def test_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path)
        main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a")])
        main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "data.csv").read_bytes() == (tmp_path / "b" / "data.csv").read_bytes()

    def test_seed_flag_overrides(self, tmp_path):
        cfg = write_config(tmp_path)
        main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a")])
        main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "99"])
        assert (tmp_path / "a" / "data.csv").read_bytes() != (tmp_path / "b" / "data.csv").read_bytes()


@pytest.fixture(scope="module")
def out(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    run_all(write_config(tmp))
    return tmp / "out"


class TestPipeline:
    def test_effects_document(self, out):
        eff = json.loads((out / "effects.json").read_text())
        assert eff["ate"]["target"] == "ATE" and eff["atte"]["target"] == "ATTE"
        assert {"rmse_m", "rmse_g0", "rmse_g1"} <= set(eff["nuisance_rmse"])
        assert eff["trim"]["bounds"] == [0.025, 0.975]
        oracle = json.loads((out / "oracle.json").read_text())
        assert abs(eff["ate"]["theta_hat"] - oracle["theta_ate"]) < 3 * eff["ate"]["std_error"]

    def test_rmse_near_noise_floor(self, out):
        rmse = json.loads((out / "nuisance_rmse.json").read_text())
        assert abs(rmse["rmse_g0"] - rmse["noise_floor_g"]) < 0.1
        assert abs(rmse["rmse_m"] - rmse["noise_floor_m"]) < 0.05

    def test_grid_files(self, out):
        one = read_csv(out / "cate_1d.csv")
        two = read_csv(out / "cate_2d.csv")
        assert one[0] == ["x_tilde", "theta_hat", "lo_pt", "hi_pt", "lo_unif", "hi_unif"]
        assert len(one) == 51 and len(two) == 2501
        assert len(two[0]) == 7

    def test_evaluation_rows(self, out):
        rows = read_csv(out / "evaluation.csv")
        assert rows[0] == ["method", "gamma", "policy", "share", "gate", "gate_se", "value", "value_se"]
        body = rows[1:]
        assert len(body) == 12 + 1
        assert sum(r[0] == "Observed" for r in body) == 1
        for r in body:
            share, gate, value = float(r[3]), float(r[4]), float(r[6])
            assert abs(value - share * gate) <= 1e-9

    def test_policies_and_regions(self, out):
        doc = json.loads((out / "policies.json").read_text())
        assert len(doc["policies"]) == 12
        regions = sorted(p.name for p in (out / "regions").iterdir())
        assert len(regions) == 12
        assert read_csv(out / "regions" / regions[0])[0] == ["z1", "z2", "action"]

    def test_report(self, out):
        text = (out / "report.md").read_text()
        assert "ATE" in text and "observed" in text


def test_full_rerun_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path)
    run_all(cfg, tmp_path / "a")
    run_all(cfg, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) > 10
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_intercept_basis_is_flat_ate(tmp_path):
    cfg = write_config(tmp_path, basis_1d={"kind": "intercept"}, basis_2d=None)
    for cmd in ("simulate", "fit", "cate"):
        assert main([cmd, "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    ate = json.loads((out / "effects.json").read_text())["ate"]["theta_hat"]
    theta = np.array([float(r[1]) for r in read_csv(out / "cate_1d.csv")[1:]])
    np.testing.assert_allclose(theta, ate, rtol=1e-12)
    assert not (out / "cate_2d.csv").exists()


def test_conservative_and_greedy_flags(tmp_path):
    cfg = write_config(tmp_path, conservative=True, greedy=True, gammas=[0.02])
    run_all(cfg)
    methods = [r[0] for r in read_csv(tmp_path / "out" / "evaluation.csv")[1:]]
    assert sorted(methods) == sorted([
        "CATE 1D", "CATE 2D", "Depth-1 Tree", "Depth-2 Tree", "CATE 1D lower CI",
        "CATE 2D lower CI", "Greedy Depth-1 Tree", "Greedy Depth-2 Tree", "Observed",
    ])


def test_csv_input(tmp_path):
    cfg = write_config(tmp_path)
    main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "sim")])
    doc = json.loads(cfg.read_text())
    del doc["simulate"]
    doc["input"] = {"csv": "sim/data.csv", "schema": {"lot_id": "lot_id"}}
    cfg.write_text(json.dumps(doc))
    for cmd in ("fit", "cate", "policy"):
        assert main([cmd, "--config", str(cfg)]) == 0
    scores = read_csv(tmp_path / "out" / "scores.csv")
    assert scores[1][0] == "L000"


class TestExitCodes:
    def test_config_error(self, tmp_path):
        cfg = write_config(tmp_path, folds=1)
        assert main(["fit", "--config", str(cfg)]) == 2

    def test_unknown_key(self, tmp_path):
        cfg = write_config(tmp_path, colour="red")
        assert main(["fit", "--config", str(cfg)]) == 2

    def test_both_sources(self, tmp_path):
        cfg = write_config(tmp_path, input={"csv": "x.csv"})
        assert main(["fit", "--config", str(cfg)]) == 2

    def test_bad_gamma(self, tmp_path):
        cfg = write_config(tmp_path, gammas=[0.01, -0.02])
        assert main(["fit", "--config", str(cfg)]) == 2

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{not json")
        assert main(["fit", "--config", str(path)]) == 2

    def test_estimation_error(self, tmp_path):
        cfg = write_config(tmp_path, simulate={"n": 40, "seed": 1}, folds=30)
        assert main(["fit", "--config", str(cfg)]) == 3

    def test_missing_input_file(self, tmp_path):
        cfg = write_config(tmp_path)
        doc = json.loads(cfg.read_text())
        del doc["simulate"]
        doc["input"] = {"csv": "nope.csv"}
        cfg.write_text(json.dumps(doc))
        assert main(["fit", "--config", str(cfg)]) == 4

    def test_missing_stage_output(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["cate", "--config", str(cfg)]) == 4


def test_config_roundtrip():
    cfg = pipeline.PipelineConfig.from_dict(FAST)
    assert pipeline.PipelineConfig.from_dict(cfg.to_dict()) == cfg
