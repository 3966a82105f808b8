import hashlib
import json

import pytest
from click.testing import CliRunner

from signdyn.cli import ExperimentConfig, main
from signdyn.el_model import ConfigError


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"plant": "two_tank", "n_traj": 8, "duration": 30.0,
                                "train": {"max_epochs": 3, "patience": 2}}))
    return str(path)


def run(*args):
    res = CliRunner().invoke(main, list(args))
    return res


def test_generate_writes_manifest(tmp_path, cfg_file):
    out = tmp_path / "gen"
    res = run("generate", "--config", cfg_file, "--out", str(out), "--seed", "5")
    assert res.exit_code == 0, res.output
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["seed"] == 5
    for name, digest in man["files"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
    meta = json.loads((out / "dataset.json").read_text())
    assert meta["config_hash"] == man["config_hash"] and meta["n_traj"] == 8


def test_train_verify_mpc_pipeline(tmp_path, cfg_file):
    data = tmp_path / "gen"
    assert run("generate", "--config", cfg_file, "--out", str(data)).exit_code == 0
    tr = tmp_path / "tr"
    res = run("train", "--config", cfg_file, "--data", str(data), "--out", str(tr))
    assert res.exit_code == 0, res.output
    assert "test R2" in res.output
    model = str(tr / "model.json")
    res = run("verify", "--config", cfg_file, "--model", model, "--out", str(tmp_path / "v"),
              "--n-samples", "200")
    assert res.exit_code == 0, res.output
    rep = json.loads((tmp_path / "v" / "verify_report.json").read_text())
    assert rep["passed"]
    res = run("mpc", "--config", cfg_file, "--model", model, "--out", str(tmp_path / "m"), "--plot")
    assert res.exit_code == 0, res.output
    header = (tmp_path / "m" / "closed_loop.csv").read_text().splitlines()[0]
    assert header == "step,x_1,x_2,u_1,solver_status,primal_res,dual_res,solve_iterations"
    assert (tmp_path / "m" / "closed_loop.svg").read_text().startswith("<svg")


def test_evaluate_is_reproducible(tmp_path, cfg_file):
    outs = []
    for k in range(2):
        out = tmp_path / f"e{k}"
        res = run("evaluate", "--config", cfg_file, "--out", str(out))
        assert res.exit_code == 0, res.output
        outs.append((out / "r2_table.csv").read_text())
    assert outs[0] == outs[1]
    assert outs[0].splitlines()[0] == "model,interpolation,extrapolation"
    assert len(outs[0].splitlines()) == 6


def test_nn_verify_reports_violations(tmp_path, cfg_file):
    res = run("verify", "--config", cfg_file, "--family", "nn_baseline", "--out", str(tmp_path),
              "--n-samples", "500")
    rep = json.loads((tmp_path / "verify_report.json").read_text())
    assert res.exit_code == (0 if rep["passed"] else 3)


def test_errors_are_structured(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"plant": "two_tank", "colour": "red"}))
    res = run("generate", "--config", str(bad), "--out", str(tmp_path / "o"))
    assert res.exit_code == 1
    err = json.loads((tmp_path / "o" / "error.json").read_text())
    assert err["error"] == "ConfigError" and "colour" in err["message"]
    res = run("mpc", "--model", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o2"))
    assert res.exit_code == 1
    res = run("train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o3"))
    assert res.exit_code == 1


def test_config_validation_and_hash():
    a = ExperimentConfig(seed=1)
    assert a.hash() == ExperimentConfig(seed=1).hash() != ExperimentConfig(seed=2).hash()
    assert ExperimentConfig(plant="powertrain").duration == 60.0
    with pytest.raises(ConfigError):
        ExperimentConfig(plant="boiler")
    with pytest.raises(ConfigError):
        ExperimentConfig(n_traj=1)
