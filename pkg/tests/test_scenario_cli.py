import os

import numpy as np
import pytest
import yaml

from specaccess import config as cfgmod
from specaccess.cli import main
from specaccess.config import ConfigError, EstimatorConfig, ScenarioConfig, SolverConfig
from specaccess.metrics import read_table
from specaccess.scenario import run_distributed_episode, run_scenario

SMALL = {
    "K": 6, "K_prime": 3, "kappa": 2, "J_L": 2, "horizon": 300,
    "solver": {"u_beliefs": 16, "n_mc": 16},
    "estimator": {"mode": "known"},
    "multi_agent": {"n_agents": 2, "sensing_per_agent": 1},
    "roc": {"lambdas": [0.0, 1.0], "n_seeds": 2},
}


def small(**changes):
    return cfgmod.from_mapping(SMALL).with_overrides(**changes)


@pytest.fixture
def cfg_file(tmp_path):
    def write(data=None, name="cfg.yaml"):
        path = tmp_path / name
        path.write_text(yaml.safe_dump(SMALL if data is None else data))
        return str(path)
    return write


def test_zero_horizon():
    res = run_scenario(small(horizon=0))
    s = res.report.scalars
    assert res.report.utility == [] and res.report.loss == []
    assert s["cr_throughput_bps"] == 0.0 and s["lu_throughput_bps"] == 0.0


def test_genie_has_zero_loss():
    res = run_scenario(small(), "genie")
    loss = np.array(res.report.loss)
    assert np.all(loss[~np.isnan(loss)] == 0.0)


def test_mean_utility_matches_recomputed_rewards():
    res = run_scenario(small())
    busy = res.truth.astype(bool)
    per_slot = [sum((1 - 2 * b) for a, b in zip(acc, row) if a) for acc, row in zip(res.access, busy)]
    assert res.report.scalars["mean_utility"] == pytest.approx(np.mean(per_slot), abs=1e-12)


def test_episode_log_consistency():
    ep = run_distributed_episode(small())
    total = {}
    for slot, _, _, k, bit, u in ep.log_rows:
        if k != "":
            assert u == (1.0 if bit == 0 else -1.0)
        total[slot] = total.get(slot, 0.0) + u
    util = np.array([total.get(t + 1, 0.0) for t in range(300)])
    assert np.allclose(util, ep.utilities)
    assert ep.report.scalars["mean_utility"] == pytest.approx(util.mean())


def test_learning_modes_record_estimates():
    for mode in ("concurrent", "sequential"):
        cfg = small(horizon=600, estimator=EstimatorConfig(mode=mode, update_start=200, max_iters=5))
        res = run_scenario(cfg)
        assert res.theta_hat is not None and res.report.estimator
        assert "estimator_final_mse" in res.report.scalars


def test_config_errors_name_the_field(tmp_path):
    with pytest.raises(ConfigError, match="kappa"):
        cfgmod.from_mapping({"kappa": 0})
    with pytest.raises(ConfigError, match="unknown top-level key"):
        cfgmod.from_mapping({"kapa": 2})
    with pytest.raises(ConfigError, match="solver"):
        cfgmod.from_mapping({"solver": {"u_belief": 3}})
    with pytest.raises(ConfigError, match="estimator.mode"):
        cfgmod.from_mapping({"estimator": {"mode": "later"}})


def test_yaml_round_trip(tmp_path):
    cfg = small(seed=7)
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(cfgmod.to_mapping(cfg)))
    assert cfgmod.load(path) == cfg


def test_cli_exit_codes(tmp_path, cfg_file):
    good = cfg_file()
    assert main(["run", "--config", good, "--out", str(tmp_path / "r")]) == 0
    for name in ("metrics.csv", "utility_trace.csv", "loss_trace.csv", "roc.csv",
                 "estimator_trace.csv", "solver_trace.csv"):
        assert os.path.exists(tmp_path / "r" / name)
    bad = cfg_file({"K": 6, "kappa": 9}, "bad.yaml")
    assert main(["run", "--config", bad, "--out", str(tmp_path / "b")]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path / "m")]) == 2
    slow = cfg_file({**SMALL, "estimator": {"max_iters": 1, "tol": 1e-12}}, "slow.yaml")
    out = tmp_path / "e"
    assert main(["estimate", "--config", slow, "--out", str(out)]) == 3
    header, rows = read_table(out / "estimator_trace.csv")
    assert header[0] == "iteration" and len(rows) == 2


def test_cli_subcommands_and_lambda_dirs(tmp_path, cfg_file):
    c = cfg_file()
    assert main(["simulate", "--config", c, "--out", str(tmp_path / "s")]) == 0
    log = str(tmp_path / "s" / "sensing_log.csv")
    assert main(["estimate", "--config", c, "--input", log, "--out", str(tmp_path / "e")]) in (0, 3)
    assert main(["solve", "--config", c, "--lambda", "0,2", "--out", str(tmp_path / "p")]) == 0
    assert os.path.exists(tmp_path / "p" / "lambda_2" / "policy_fragment2.csv")
    assert main(["ma-run", "--config", c, "--out", str(tmp_path / "m")]) == 0
    assert main(["roc", "--config", c, "--out", str(tmp_path / "c")]) == 0
    assert len(read_table(tmp_path / "c" / "roc_sweep.csv")[1]) == 2
    assert main(["run", "--config", c, "--out", str(tmp_path / "r"), "--concurrent-learning", "false"]) in (0, 3)
    assert main(["report", "--input", str(tmp_path / "r"), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "r" / "metrics.csv").read_bytes() == (tmp_path / "again" / "metrics.csv").read_bytes()


def _snapshot(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            path = os.path.join(dirpath, f)
            out[os.path.relpath(path, root)] = open(path, "rb").read()
    return out


@pytest.mark.parametrize("command", ["simulate", "run", "ma-run"])
def test_cli_byte_determinism(tmp_path, cfg_file, command):
    c = cfg_file()
    main([command, "--config", c, "--seed", "3", "--out", str(tmp_path / "a")])
    main([command, "--config", c, "--seed", "3", "--out", str(tmp_path / "b")])
    a, b = _snapshot(tmp_path / "a"), _snapshot(tmp_path / "b")
    assert a and a == b
