import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from mpcrl.harness import (
    ConfigError,
    ExperimentConfig,
    RecordError,
    RunRecord,
    SchemaVersionError,
    check_grad,
    dp_oracle,
    plot_data,
    read_events,
    run,
    sweep,
)
from mpcrl.harness.checks import jacobian_error
from mpcrl.harness.cli import main
from mpcrl.harness.records import RunWriter, decode_events, encode_event
from mpcrl.harness.run import grid_axes, relative_gap
from mpcrl.mdp.dp import DiscreteMDP, save_mdp


def base_config(out, learner="reinforce", learner_config=None, **top):
    d = {
        "env": {"id": "linear_gaussian",
                "params": {"A": [[1.05]], "B": [[1.0]], "Q": [[1.0]], "R": [[0.1]], "noise_std": 0.1,
                           "x0_box": 1.0, "action_bound": 2.0}},
        "policy": {"family": "mpc", "ocp": {"H": 5, "input_box": True},
                   "theta": {"Q": [1.0], "R": [0.1], "A": [[1.05]], "B": [[0.5]], "u_lo": -2.0, "u_hi": 2.0},
                   "learnable": ["dyn_B"], "bounds": {"dyn_B": [0.05, 5.0]}},
        "learner": {"id": learner, "config": learner_config if learner_config is not None else
                    {"eta": 0.1, "clip": 1.0, "max_iterations": 2, "episodes_per_iteration": 4, "sigma": 0.2}},
        "gamma": 0.95, "T": 8, "n_episodes": 4, "seed": 5, "output": str(out),
    }
    d.update(top)
    return d


def write_config(tmp_path, d, name="exp.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(d, sort_keys=False))
    return p


# -- configuration ---------------------------------------------------------------

def test_validation_reports_every_error():
    d = base_config("out", gamma=1.2, T=0)
    d["env"]["id"] = "warp_drive"
    d["bogus"] = 1
    d["learner"]["config"]["eta"] = -1.0
    d["learner"]["config"]["gamma"] = 0.5
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_dict(d).validate()
    text = str(exc.value)
    for fragment in ("gamma", "T", "warp_drive", "bogus", "eta"):
        assert fragment in text
    assert len(exc.value.errors) >= 5


def test_overrides_and_hash(tmp_path, monkeypatch):
    p = write_config(tmp_path, base_config(tmp_path / "r"))
    cfg = ExperimentConfig.load(p)
    assert len(cfg.hash) == 64
    o = cfg.with_overrides(seed=9, output=str(tmp_path / "other"), threads=2)
    assert o.seed == 9 and o.threads == 2 and Path(o.output) == tmp_path / "other"
    monkeypatch.setenv("MPCRL_OUT", str(tmp_path / "env_out"))
    assert Path(ExperimentConfig.load(p).output) == tmp_path / "env_out"


# -- records ---------------------------------------------------------------------

def test_event_encoding_is_exact_and_versioned():
    line = encode_event({"event": "x", "v": 0.1 + 0.2, "bad": float("nan"), "arr": np.array([1.5, np.inf])})
    body = json.loads(line)
    assert list(body)[0] == "schema_version"
    assert body["v"] == 0.1 + 0.2 and body["bad"] is None and body["arr"] == [1.5, None]
    with pytest.raises(SchemaVersionError):
        decode_events(line.replace('"schema_version":1', '"schema_version":99'))


def test_writer_is_atomic(tmp_path):
    w = RunWriter(tmp_path / "run", "cfg: 1\n")
    w.event(event="start")
    assert not (tmp_path / "run").exists()
    w.abort()
    assert list(tmp_path.iterdir()) == []


def test_tampered_config_is_detected(tmp_path):
    rec = run(ExperimentConfig.load(write_config(tmp_path, base_config(tmp_path / "r", "none", {}))))
    (rec.path / "config.copy").write_text("edited\n")
    with pytest.raises(RecordError):
        RunRecord.load(rec.path)


# -- runs ------------------------------------------------------------------------

def test_reinforce_run_is_byte_reproducible(tmp_path):
    p = write_config(tmp_path, base_config(tmp_path / "a"))
    a = run(ExperimentConfig.load(p))
    b = run(ExperimentConfig.load(p).with_overrides(output=str(tmp_path / "b"), threads=3))
    assert (a.path / "events.jsonl").read_bytes() == (b.path / "events.jsonl").read_bytes()
    assert a.status == "ok" and np.isfinite(a.best_J)
    assert (a.path / "config.copy").read_bytes() == p.read_bytes()
    kinds = [e["event"] for e in a.events]
    assert kinds[0] == "start" and kinds[-1] == "end" and kinds.count("iteration") == 3


def test_bo_and_bc_runs_write_datasets(tmp_path):
    d = base_config(tmp_path / "bo", "bo", {"budget": 4, "n_initial": 2, "lower": [0.1], "upper": [3.0]})
    rec = run(ExperimentConfig.from_dict(d))
    assert (rec.path / "dataset.csv").exists()
    assert len([e for e in rec.events if e["event"] == "query"]) == 4

    d = base_config(tmp_path / "bc", "bc", {"expert": {"B": [[1.0]]}, "n_pairs": 30, "collect_T": 10})
    rec = run(ExperimentConfig.from_dict(d))
    assert rec.status == "ok"
    assert float(RunRecord.load(rec.path).best_theta[0]) == pytest.approx(1.0, abs=1e-3)


def test_failed_run_keeps_a_record(tmp_path):
    # a state-box MPC on an exploding plant with no input authority cannot stay feasible
    d = base_config(tmp_path / "f", "reinforce")
    d["env"]["params"].update({"A": [[3.0]], "B": [[0.0]], "x0_box": 50.0})
    d["policy"]["theta"].update({"A": [[3.0]], "B": [[0.0]]})
    d["policy"]["learnable"] = ["stage_q"]
    d["policy"]["bounds"] = {}
    d["policy"]["ocp"]["state_box"] = False
    d["policy"]["ocp"]["poly_Cx"] = [[0.0]]
    d["policy"]["ocp"]["poly_Cu"] = [[1.0]]
    d["policy"]["theta"]["poly_d"] = [-5.0]
    code = main(["run", "--config", str(write_config(tmp_path, d))])
    assert code == 3
    rec = RunRecord.load(tmp_path / "f")
    assert rec.status == "failed"


# -- sweep, plot data, checks ----------------------------------------------------

def test_single_point_sweep_matches_direct_evaluation(tmp_path):
    d = base_config(tmp_path / "s", "none", {})
    cfg = ExperimentConfig.from_dict(d)
    rec = sweep(cfg, {"axes": [{"values": [0.5]}]})
    direct = run(cfg.with_overrides(output=str(tmp_path / "direct")))
    assert rec.best_J == direct.best_J
    pts = [e for e in rec.events if e["event"] == "point"]
    assert len(pts) == 1 and pts[0]["theta"] == [0.5]
    assert relative_gap(direct.best_J, rec.best_J) == 0.0


def test_grid_axis_errors():
    with pytest.raises(ConfigError):
        grid_axes({"axes": [{"values": [1]}, {"bad": 1}]}, 1)
    assert [a.tolist() for a in grid_axes({"axes": [{"linspace": [0, 1, 3]}]}, 1)] == [[0.0, 0.5, 1.0]]


def test_plot_data_tables(tmp_path):
    rec = run(ExperimentConfig.from_dict(base_config(tmp_path / "r")))
    files = plot_data(rec.path)
    rows = files["learning_curve"].read_text().splitlines()
    assert rows[0].startswith("iteration,J_mean,J_stderr,dyn_B") and len(rows) == 4
    with pytest.raises(RecordError):
        plot_data(tmp_path / "missing")
    (tmp_path / "empty").mkdir()
    with pytest.raises(RecordError):
        plot_data(tmp_path / "empty")


def test_dp_oracle_agrees_with_enumeration(tmp_path):
    mdp = DiscreteMDP.random(4, 3, 0.85, np.random.default_rng(2))
    save_mdp(mdp, tmp_path / "m.txt")
    tables = dp_oracle(tmp_path / "m.txt", out=tmp_path / "o")
    assert tables.agree and tables.residual <= 1e-10
    assert np.allclose(tables.V, tables.V_enumerated, atol=1e-9)
    assert (tmp_path / "o" / "q_table.csv").read_text().count("\n") == 13


def test_check_grad_passes(tmp_path):
    report = check_grad(n_instances=10, seed=1, out=tmp_path)
    assert report.passed
    assert {r.status for r in report.of_kind("licq_violating")} == {"refused"}
    assert (tmp_path / "gradcheck.csv").exists()
    assert "gradcheck_scatter" in plot_data(tmp_path)


def test_jacobian_error_floor():
    assert jacobian_error([[1e-6]], [[0.0]]) == pytest.approx(1e-3)
    assert jacobian_error([[2.0]], [[1.0]]) == 1.0
    with pytest.raises(ValueError):
        jacobian_error([[1.0]], [1.0, 2.0])


# -- command line ----------------------------------------------------------------

def test_cli_exit_codes(tmp_path, capsys):
    good = write_config(tmp_path, base_config(tmp_path / "c", "none", {}))
    assert main(["run", "--config", str(good)]) == 0
    assert main(["run-bo", "--config", str(good)]) == 2
    bad = write_config(tmp_path, base_config(tmp_path / "c", gamma=2.0), "bad.yaml")
    assert main(["run", "--config", str(bad)]) == 2
    assert main(["run", "--config", str(tmp_path / "nope.yaml")]) == 2
    assert main(["run", "--seed", "-1", "--config", str(good)]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["plot-data", str(tmp_path / "c")]) == 2   # a 'none' run has nothing to plot
    capsys.readouterr()


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "mpcrl", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("mpcrl ")
    mdp = DiscreteMDP.random(3, 2, 0.9, np.random.default_rng(0))
    save_mdp(mdp, tmp_path / "m.txt")
    out = subprocess.run([sys.executable, "-m", "mpcrl", "dp-oracle", "--mdp", str(tmp_path / "m.txt")],
                         capture_output=True, text=True, env={**os.environ})
    assert out.returncode == 0 and "matches enumeration" in out.stdout
