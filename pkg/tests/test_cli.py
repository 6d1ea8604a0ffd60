import csv
import json
import os

import numpy as np
import pytest

import cli
from static.examples import example_config_path, limit_check_config_path
from transport_plan import verify_plan
from utils.errors import ConfigParseError, ConfigValidationError

SMALL = """\
[problem]
mode = sb
steps = 4
dt = 0.5
eps = 0.4

[component]
side = initial
mean = 0 0
variance = 0.1

[component]
side = terminal
weight = 0.5
mean = 1 0
variance = 0.1

[component]
side = terminal
weight = 0.5
mean = -1 0
cov = 0.1 0; 0 0.2

[simulation]
paths = 300
seed = 5
schemes = per-step, once
saved_paths = 3
"""


def _write(tmp_path, text, name="problem.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_example1_config():
    config = cli.load_config(example_config_path(1))
    assert config.mode == "sb"
    assert config.N == 10
    assert config.eps == pytest.approx(0.01)
    assert len(config.rho0) == 1 and len(config.rhoN) == 8
    np.testing.assert_allclose(config.rhoN.weights, np.full(8, 1.0 / 8))
    np.testing.assert_allclose(config.rhoN.components[2].mean, [0.0, 5.0], atol=1e-12)


def test_half_ring_switch(tmp_path):
    with open(example_config_path(1)) as f:
        text = f.read().replace("angles = full", "angles = half")
    config = cli.load_config(_write(tmp_path, text))
    theta = np.pi / 8
    np.testing.assert_allclose(config.rhoN.components[1].mean, 5 * np.array([np.cos(theta), np.sin(theta)]))


def test_example2_config():
    config = cli.load_config(example_config_path(2))
    assert config.mode == "ds"
    assert config.dynamics_kind == "double-integrator"
    assert config.N == 20
    assert config.dt == pytest.approx(0.05)
    assert config.dynamics.n == 4 and config.dynamics.m == 2
    np.testing.assert_allclose(config.rho0.weights, [0.5, 0.5])
    np.testing.assert_allclose(config.rhoN.weights, np.full(3, 1.0 / 3))
    np.testing.assert_allclose(config.dynamics.A[0][:2, 2:], 0.05 * np.eye(2))


def test_weights_not_on_simplex(tmp_path):
    text = SMALL.replace("weight = 0.5\nmean = -1 0", "weight = 0.4\nmean = -1 0")
    with pytest.raises(ConfigValidationError) as info:
        cli.load_config(_write(tmp_path, text))
    assert "terminal GMM" in str(info.value)
    assert info.value.field.startswith("component:2")


def test_parse_error_reports_line(tmp_path):
    text = SMALL.replace("eps = 0.4", "eps = 0.4\nthis line has no value")
    with pytest.raises(ConfigParseError) as info:
        cli.load_config(_write(tmp_path, text))
    assert info.value.line == 6


def test_unknown_key_and_bad_number(tmp_path):
    with pytest.raises(ConfigValidationError) as info:
        cli.load_config(_write(tmp_path, SMALL.replace("eps = 0.4", "eps = 0.4\ncolour = red")))
    assert "unknown key" in str(info.value)
    with pytest.raises(ConfigValidationError) as info:
        cli.load_config(_write(tmp_path, SMALL.replace("eps = 0.4", "eps = lots")))
    assert ":5:" in str(info.value)


def test_non_spd_covariance_is_validation_error(tmp_path):
    with pytest.raises(ConfigValidationError):
        cli.load_config(_write(tmp_path, SMALL.replace("cov = 0.1 0; 0 0.2", "cov = 0.1 0.5; 0.5 0.2")))


def test_solve_writes_a_feasible_plan(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["solve", "--config", _write(tmp_path, SMALL), "--out", str(out)]) == 0
    with open(out / "plan.json") as f:
        plan = json.load(f)
    assert verify_plan(np.array(plan["lambda"]), plan["alpha"], plan["beta"])
    assert plan["objective"] == pytest.approx(np.sum(np.array(plan["lambda"]) * np.array(plan["costs"])))

    with open(out / "marginals.csv") as f:
        rows = list(csv.DictReader(f))
    first = [r for r in rows if r["k"] == "0"][0]
    assert [float(first["mean_0"]), float(first["mean_1"])] == [0.0, 0.0]
    assert float(first["cov_0_0"]) == 0.1 and float(first["cov_0_1"]) == 0.0
    last = [r for r in rows if r["k"] == "4" and r["j"] == "1"][0]
    assert float(last["mean_0"]) == -1.0 and float(last["cov_1_1"]) == 0.2


def test_density_steering_marginals_keep_configured_boundaries(tmp_path):
    text = SMALL.replace("mode = sb", "mode = ds\ndynamics = random-walk")
    out = tmp_path / "ds"
    assert cli.main(["solve", "--config", _write(tmp_path, text), "--out", str(out)]) == 0
    with open(out / "marginals.csv") as f:
        rows = list(csv.DictReader(f))
    for row in (r for r in rows if r["k"] == "0"):
        assert [float(row["mean_0"]), float(row["mean_1"])] == [0.0, 0.0]
        assert [float(row[f"cov_{a}_{b}"]) for a in range(2) for b in range(2)] == [0.1, 0.0, 0.0, 0.1]
    terminal = {r["j"]: r for r in rows if r["k"] == "4"}
    assert [float(terminal["0"][f"cov_{a}_{b}"]) for a in range(2) for b in range(2)] == [0.1, 0.0, 0.0, 0.1]
    assert [float(terminal["1"][f"cov_{a}_{b}"]) for a in range(2) for b in range(2)] == [0.1, 0.0, 0.0, 0.2]
    assert float(terminal["0"]["mean_0"]) == 1.0 and float(terminal["1"]["mean_0"]) == -1.0


def test_explicit_dynamics_per_step(tmp_path):
    text = SMALL.replace("mode = sb", "mode = ds\ndynamics = explicit") + (
        "\n[dynamics]\n"
        "A = 1 0; 0 1 | 1 0; 0 1 | 0.9 0; 0 0.9 | 0.9 0; 0 0.9\n"
        "B = 1 0; 0 1\n"
        "D = 0.3 0; 0 0.3\n"
    )
    config = cli.load_config(_write(tmp_path, text))
    assert config.dynamics.A.shape == (4, 2, 2)
    np.testing.assert_allclose(config.dynamics.A[2], 0.9 * np.eye(2))
    np.testing.assert_allclose(config.dynamics.B[3], np.eye(2))

    with pytest.raises(ConfigValidationError) as info:
        cli.load_config(_write(tmp_path, text.replace(" | 0.9 0; 0 0.9\n", "\n", 1)))
    assert "1 or 4 matrices" in str(info.value)


def test_simulate_is_byte_reproducible(tmp_path):
    config = _write(tmp_path, SMALL)
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["simulate", "--config", config, "--out", str(out)]) == 0
        outputs.append({f: (out / f).read_bytes() for f in sorted(os.listdir(out))})
    assert outputs[0] == outputs[1]
    assert set(outputs[0]) == {"plan.json", "marginals.csv", "trajectories.csv", "estimates.json"}

    estimates = json.loads(outputs[0]["estimates.json"])
    assert set(estimates["schemes"]) == {"per-step", "once"}
    assert "per_step_minus_once" in estimates
    header = outputs[0]["trajectories.csv"].decode().splitlines()[0]
    assert header == "path,k,x_0,x_1,scheme"


def test_overrides(tmp_path):
    out = tmp_path / "o"
    args = ["simulate", "--config", _write(tmp_path, SMALL), "--out", str(out),
            "--seed-override", "77", "--paths-override", "40"]
    assert cli.main(args) == 0
    estimates = json.loads((out / "estimates.json").read_text())
    assert estimates["seed"] == 77 and estimates["paths"] == 40


def test_exit_codes(tmp_path):
    bad = _write(tmp_path, SMALL.replace("steps = 4", "steps = zero"), "bad.cfg")
    assert cli.main(["solve", "--config", bad, "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["solve", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path / "x")]) == 2
    # eps * T = 0.02 cannot carry the variance from 0.1 up to 0.2
    infeasible = _write(tmp_path, SMALL.replace("eps = 0.4", "eps = 0.01"), "infeasible.cfg")
    assert cli.main(["solve", "--config", infeasible, "--out", str(tmp_path / "y")]) == 3


def test_failed_run_leaves_no_partial_outputs(tmp_path):
    text = SMALL + "\n[limit]\nT = 2.0\ndt_list = 0.3\n"
    out = tmp_path / "partial"
    assert cli.main(["simulate", "--config", _write(tmp_path, text), "--out", str(out)]) == 3
    assert not out.exists() or os.listdir(out) == []


def test_limit_check_command(tmp_path):
    out = tmp_path / "limits"
    assert cli.main(["limit-check", "--config", limit_check_config_path(), "--out", str(out)]) == 0
    with open(out / "limits.csv") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == ["dt", "drift_err", "diff_err", "ratio", "steps", "k", "gen_err"]
    assert [float(r["dt"]) for r in rows] == [0.1, 0.05, 0.025, 0.0125]
    for r in rows[1:]:
        assert 1.6 <= float(r["ratio"]) <= 2.4


def test_limit_check_needs_limit_block(tmp_path):
    assert cli.main(["limit-check", "--config", _write(tmp_path, SMALL), "--out", str(tmp_path / "n")]) == 2


def test_reproduce_example_one(tmp_path):
    out = tmp_path / "ex1"
    assert cli.main(["reproduce-example", "1", "--out", str(out), "--paths-override", "200"]) == 0
    for mode in ("sb", "ds"):
        assert (out / mode / "trajectories.csv").exists()
        plan = json.loads((out / mode / "plan.json").read_text())
        assert plan["mode"] == mode
        np.testing.assert_allclose(plan["lambda"], [[1.0 / 8] * 8])


def test_reproduce_example_rejects_a_config(tmp_path):
    with pytest.raises(SystemExit) as info:
        cli.main(["reproduce-example", "2", "--config", _write(tmp_path, SMALL)])
    assert info.value.code == 2
