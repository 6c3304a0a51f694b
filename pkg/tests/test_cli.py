import json
import os
import subprocess
import sys

import numpy as np
import pytest

from kalman_learn.cli import main, resolve_threads, run
from kalman_learn.config import ConfigError, config_from_dict, load_config

from conftest import CONFIGS, DATA, ROOT


def _write_cfg(tmp_path, raw):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(raw))
    return p


# config


def test_defaults_fill_every_section():
    cfg = config_from_dict({"command": "simulate"})
    assert cfg.seed == 0 and cfg.threads == 1
    assert cfg["train"]["ensemble_size"] == 100 and cfg["train"]["r"] == 0.01
    assert cfg["lorenz"]["steps"] == 3000 and cfg["selection"]["window"] is None


def test_error_names_the_key():
    with pytest.raises(ConfigError, match=r"train\.ensemble_size"):
        config_from_dict({"command": "simulate", "train": {"ensemble_size": -5}})
    with pytest.raises(ConfigError, match=r"lorenz\.stepz: unknown key"):
        config_from_dict({"command": "simulate", "lorenz": {"stepz": 3}})
    with pytest.raises(ConfigError, match="command"):
        config_from_dict({"seed": 1})
    with pytest.raises(ConfigError, match=r"train\.r_min"):
        config_from_dict({"command": "simulate", "train": {"tolerance_mode": "adaptive", "r": 0.01, "r_min": 0.1}})
    with pytest.raises(ConfigError, match=r"data\.csv"):
        config_from_dict({"command": "train"})


def test_type_errors():
    with pytest.raises(ConfigError, match="integer"):
        config_from_dict({"command": "simulate", "lorenz": {"steps": 1.5}})
    with pytest.raises(ConfigError, match="number"):
        config_from_dict({"command": "simulate", "lorenz": {"dt": True}})


def test_paths_resolve_against_config_dir(tmp_path):
    (tmp_path / "d.csv").write_text("a,y\n1,2\n")
    cfg = load_config(_write_cfg(tmp_path, {"command": "train", "data": {"csv": "d.csv", "target_column": "y"}}))
    assert cfg["data"]["csv"] == str(tmp_path / "d.csv")
    with pytest.raises(ConfigError, match="not found"):
        config_from_dict({"command": "train", "data": {"csv": "nope.csv"}}, tmp_path)


def test_snapshot_round_trip(tmp_path):
    cfg = load_config(CONFIGS / "boston_ekl.json")
    again = config_from_dict(json.loads(cfg.dumps()), tmp_path)
    assert again.dumps() == cfg.dumps()


def test_bad_json_reports_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"command": ')
    with pytest.raises(ConfigError, match="line 1"):
        load_config(p)


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.json")))
def test_shipped_configs_validate(name):
    load_config(CONFIGS / name)


# threads


def test_threads_precedence(monkeypatch):
    monkeypatch.delenv("KALMAN_LEARN_THREADS", raising=False)
    assert resolve_threads(None, 3) == 3
    monkeypatch.setenv("KALMAN_LEARN_THREADS", "2")
    assert resolve_threads(None, 3) == 2
    assert resolve_threads(4, 3) == 4
    assert resolve_threads(0, 1) == (os.cpu_count() or 1)
    monkeypatch.setenv("KALMAN_LEARN_THREADS", "many")
    with pytest.raises(ConfigError, match="KALMAN_LEARN_THREADS"):
        resolve_threads(None, 1)


# commands


def _read_csv(path):
    lines = path.read_bytes().split(b"\r\n")
    assert lines[-1] == b""
    return [line.decode().split(",") for line in lines[:-1]]


def test_simulate_zero_steps(tmp_path):
    cfg = config_from_dict({"command": "simulate", "lorenz": {"steps": 0}})
    assert run(cfg, tmp_path) == 0
    rows = _read_csv(tmp_path / "trajectory.csv")
    assert rows[0] == ["t", "x1", "x2", "x3", "dx1", "dx2", "dx3"]
    assert len(rows) == 2
    np.testing.assert_allclose([float(v) for v in rows[1]], [0, -1.1, 2.2, -2.7, 33.0, -35.97, 4.78], atol=1e-12)
    assert json.loads((tmp_path / "config.json").read_text())["lorenz"]["steps"] == 0


def test_floats_round_trip_exactly(tmp_path):
    cfg = config_from_dict({"command": "simulate", "lorenz": {"steps": 20}})
    run(cfg, tmp_path)
    from kalman_learn.dynsys import LorenzConfig, integrate

    states = integrate(LorenzConfig(steps=20))
    got = np.array([[float(v) for v in r[1:4]] for r in _read_csv(tmp_path / "trajectory.csv")[1:]])
    np.testing.assert_array_equal(got, states)


def test_discover_writes_seven_terms(tmp_path):
    assert main(["discover", "--config", str(CONFIGS / "lorenz_discover.json"), "--out", str(tmp_path)]) == 0
    eqs = json.loads((tmp_path / "equations.json").read_text())
    assert eqs["n_active"] == 7 and eqs["converged"]
    terms = {(e["lhs"], t["term"]) for e in eqs["equations"] for t in e["terms"]}
    assert terms == {
        ("dx1/dt", "x1"), ("dx1/dt", "x2"), ("dx2/dt", "x1"), ("dx2/dt", "x2"),
        ("dx2/dt", "x1x3"), ("dx3/dt", "x3"), ("dx3/dt", "x1x2"),
    }
    survival = _read_csv(tmp_path / "survival.csv")
    assert survival[0] == ["cycle", "equation", "term", "status"]
    mi = _read_csv(tmp_path / "mi_table.csv")
    assert mi[0] == ["cycle", "term_id", "error_id", "psi", "rank", "selected"]
    assert len(mi) - 1 == 27 * eqs["cycles"]


def test_mi_command(tmp_path):
    assert main(["mi", "--config", str(CONFIGS / "lorenz_mi.json"), "--out", str(tmp_path)]) == 0
    rows = _read_csv(tmp_path / "mi_table.csv")[1:]
    assert len(rows) == 27
    assert sorted(int(r[4]) for r in rows) == list(range(1, 28))


def _boston_cfg(tmp_path, **train):
    raw = {
        "command": "train",
        "data": {"csv": str(DATA / "boston_housing.csv")},
        "train": {"epochs": 1, "ensemble_size": 20, **train},
    }
    return _write_cfg(tmp_path, raw)


def test_train_is_byte_identical(tmp_path):
    p = _boston_cfg(tmp_path)
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "a"), "--seed", "3"]) == 0
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "b"), "--seed", "3"]) == 0
    a, b = (tmp_path / "a" / "log.csv").read_bytes(), (tmp_path / "b" / "log.csv").read_bytes()
    assert a == b
    rows = _read_csv(tmp_path / "a" / "log.csv")
    assert rows[0] == ["iteration", "epoch", "train_metric", "test_metric", "mean_param_variance", "tolerance_r", "elapsed_ms"]
    assert [int(r[0]) for r in rows[1:]] == list(range(len(rows) - 1))
    assert json.loads((tmp_path / "a" / "config.json").read_text())["seed"] == 3
    cmp = _read_csv(tmp_path / "a" / "comparison.csv")
    assert cmp[1][0] == "ekl"


def test_threads_env_gives_same_log(tmp_path):
    p = _boston_cfg(tmp_path)
    env = dict(os.environ, KALMAN_LEARN_THREADS="2")
    cmd = [sys.executable, "-m", "kalman_learn.cli", "train", "--config", str(p)]
    subprocess.run(cmd + ["--out", str(tmp_path / "t2")], env=env, check=True, cwd=ROOT)
    main(["train", "--config", str(p), "--out", str(tmp_path / "t1"), "--threads", "1"])
    assert (tmp_path / "t2" / "log.csv").read_bytes() == (tmp_path / "t1" / "log.csv").read_bytes()
    assert json.loads((tmp_path / "t2" / "config.json").read_text())["threads"] == 2


def test_config_error_exit_code(tmp_path, capsys):
    p = _write_cfg(tmp_path, {"command": "simulate", "lorenz": {"steps": -1}})
    assert main(["simulate", "--config", str(p), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "lorenz.steps" in err and err.count("\n") == 1


def test_command_mismatch(tmp_path, capsys):
    assert main(["mi", "--config", str(CONFIGS / "lorenz_simulate.json"), "--out", str(tmp_path)]) == 2


def test_network_shape_mismatch(tmp_path):
    raw = {"command": "train", "data": {"csv": str(DATA / "boston_housing.csv")}, "network": {"widths": [5, 1]}}
    assert main(["train", "--config", str(_write_cfg(tmp_path, raw)), "--out", str(tmp_path)]) == 2


def test_nonconvergence_exit_code(tmp_path):
    raw = {"command": "discover", "discover_mode": "full", "lorenz": {"steps": 200}, "estimation": {"max_iters": 2}}
    assert main(["discover", "--config", str(_write_cfg(tmp_path, raw)), "--out", str(tmp_path)]) == 3
    assert json.loads((tmp_path / "equations.json").read_text())["converged"] is False
