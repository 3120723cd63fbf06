from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gpctc import cli, experiments, storage
from gpctc.config import ConfigError, ExperimentConfig, dump_config, parse_config
from gpctc.gp_core import Hyperparameters

TINY = """
[system]
name = one_dof
c = 1.0

[training]
mode = grid
lower = 0.0, -1.0, -1.0
upper = 0.0, 1.0, 1.0
resolution = 1, 5, 5
m = 25
noise_std = 0.04
max_iters = 30

[controller]
kind = gpr_variable
Kp = 10.0
Kd = 10.0
Kp_scale = 100.0
Kd_scale = 100.0

[trajectory]
amplitude = 1.0
phase = 0.0
offset = 0.0
q0 = 0.0
qd0 = 1.0

[simulation]
horizon = 0.5
dt = 0.001
noise_std = 0.04
seed = 0

[bounds]
lower = -1.0, -1.0, -1.0
upper = 1.0, 1.0, 1.0
resolution = 5, 5, 5
candidates = 60
target_r = 5.0
kd1_values = 1.0, 10.0, 100.0, 1000.0
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


# ----------------------------------------------------------------- storage

def test_training_csv_round_trip(tmp_path, rng):
    X, Y = rng.normal(size=(6, 17)), rng.normal(size=(17, 2))
    storage.write_training_csv(tmp_path / "t.csv", X, Y)
    X2, Y2 = storage.read_training_csv(tmp_path / "t.csv")
    assert np.array_equal(X, X2) and np.array_equal(Y, Y2)
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == \
        "p_1,p_2,p_3,p_4,p_5,p_6,tau_1,tau_2"


def test_training_csv_rejects_bad_files(tmp_path):
    (tmp_path / "bad.csv").write_text("p_1,x\n1,2\n")
    with pytest.raises(ValueError):
        storage.read_training_csv(tmp_path / "bad.csv")
    (tmp_path / "nan.csv").write_text("p_1,tau_1\n1,abc\n")
    with pytest.raises(ValueError):
        storage.read_training_csv(tmp_path / "nan.csv")


@given(st.lists(st.floats(1e-6, 1e6), min_size=3, max_size=8))
def test_hyperparameter_round_trip(tmp_path_factory, vals):
    path = tmp_path_factory.mktemp("h") / "hyper.ini"
    hypers = [Hyperparameters(vals[0], tuple(vals[1:-1]), vals[-1]),
              Hyperparameters(vals[-1], tuple(reversed(vals[1:-1])), vals[0])]
    storage.write_hyperparameters(path, hypers)
    assert storage.read_hyperparameters(path) == hypers


# ------------------------------------------------------------------ config

def test_config_round_trip_defaults_and_bundled():
    for cfg in (ExperimentConfig(), cli.bundled_config("table1"), cli.bundled_config("fig3"),
                cli.bundled_config("bound_coverage")):
        assert parse_config(dump_config(cfg)) == cfg


@given(st.floats(1e-5, 1e-2), st.integers(0, 2**31), st.floats(0.01, 0.99),
       st.sampled_from(["classic_static", "gpr_static", "gpr_variable"]))
def test_config_round_trip_property(dt, seed, delta, kind):
    cfg = ExperimentConfig()
    cfg = replace(cfg, simulation=replace(cfg.simulation, dt=dt, seed=seed),
                  bounds=replace(cfg.bounds, delta=delta),
                  controller=replace(cfg.controller, kind=kind))
    assert parse_config(dump_config(cfg)) == cfg


def test_config_error_names_line():
    text = "[system]\nname = two_link\n\n[simulation]\ndt = fast\n"
    with pytest.raises(ConfigError, match=r"x.ini:5 \[simulation\] dt"):
        parse_config(text, "x.ini")


def test_config_unknown_section_and_key():
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config("[plant]\nname = x\n")
    with pytest.raises(ConfigError, match="unknown field"):
        parse_config("[simulation]\nstep = 1\n")


def test_unknown_kind_lists_valid_kinds():
    with pytest.raises(ConfigError, match="classic_static, gpr_static, gpr_variable"):
        parse_config("[controller]\nkind = pid\n")


def test_config_consistency_checks():
    with pytest.raises(ConfigError):
        parse_config("[bounds]\ndelta = 1.5\n")
    with pytest.raises(ConfigError):
        parse_config("[system]\nname = one_dof\n")  # 6-D default boxes for a 1-D system
    with pytest.raises(ConfigError):
        parse_config("[controller]\nKp = 1, 2, 3\n")


# --------------------------------------------------------------------- cli

def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[controller]\nkind = pid\n")
    assert cli.main(["simulate", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert "valid kinds" in capsys.readouterr().err
    assert cli.main(["simulate", "--config", str(tmp_path / "missing.ini")]) == cli.EXIT_CONFIG


def test_cli_missing_model_exit_code(tiny, tmp_path, capsys):
    code = cli.main(["simulate", "--config", str(tiny), "--out", str(tmp_path / "empty")])
    assert code == cli.EXIT_NOT_FOUND
    assert "gpctc train" in capsys.readouterr().err


def test_cli_classic_simulate_needs_no_model(tmp_path):
    text = TINY.replace("kind = gpr_variable", "kind = classic_static")
    (tmp_path / "c.ini").write_text(text)
    out = tmp_path / "run"
    assert cli.main(["simulate", "--config", str(tmp_path / "c.ini"), "--out", str(out)]) == 0
    rows = (out / "trajectory.csv").read_text().splitlines()
    assert len(rows) == 1 + 501
    assert (out / "metrics.csv").is_file()


def test_cli_train_simulate_bounds_pipeline(tiny, tmp_path, capsys):
    out = tmp_path / "run"
    base = ["--config", str(tiny), "--out", str(out)]
    assert cli.main(["train"] + base) == 0
    X, Y = storage.read_training_csv(out / experiments.TRAINING_CSV)
    assert X.shape == (3, 25) and Y.shape == (25, 1)
    assert len(storage.read_hyperparameters(out / experiments.HYPER_FILE)) == 1

    assert cli.main(["simulate"] + base) == 0
    first = (out / "trajectory.csv").read_bytes()
    assert cli.main(["simulate"] + base) == 0
    assert (out / "trajectory.csv").read_bytes() == first
    assert cli.main(["simulate", "--seed", "7"] + base) == 0
    assert (out / "trajectory.csv").read_bytes() != first

    # the one-DOF damping term has no linear Coriolis bound
    capsys.readouterr()
    assert cli.main(["bounds"] + base) == cli.EXIT_NUMERICAL
    assert "k_C" in capsys.readouterr().err


TINY2 = """
[training]
mode = grid
resolution = 2, 2, 2, 2, 2, 2
max_iters = 20

[simulation]
horizon = 0.3

[bounds]
resolution = 3, 3, 3, 3, 3, 3
candidates = 40
target_r = 20.0
"""


@pytest.fixture(scope="module")
def two_link(tmp_path_factory):
    out = tmp_path_factory.mktemp("two_link")
    (out / "cfg.ini").write_text(TINY2)
    assert cli.main(["train", "--config", str(out / "cfg.ini"), "--out", str(out)]) == 0
    return out


def test_cli_bounds_modes(two_link):
    base = ["--config", str(two_link / "cfg.ini"), "--out", str(two_link)]
    assert cli.main(["simulate"] + base) == 0
    for mode in ("radius", "accuracy_for_radius", "gains_for_radius"):
        assert cli.main(["bounds", "--mode", mode] + base) == 0
    rows = (two_link / "bounds_radius.csv").read_text().splitlines()[1:]
    report = {k: float(v) for k, v in (line.split(",") for line in rows)}
    assert report["r"] > 0 and report["Delta_bar"] > 0
    assert "r_v0_at_initial_error" in report
    assert 0 <= report["schur_fraction_negative_definite"] <= 1
    assert 0 <= report["stored_run_fraction_in_region"] <= 1


def test_bound_radius_zero_without_model_error():
    cfg = parse_config(TINY2.replace("[training]", "[controller]\nkind = classic_static\n\n[training]"))
    report = dict(experiments.bound_report(cfg, None, "radius").rows)
    assert report["Delta_bar"] == 0.0 and report["r"] == 0.0


def test_bound_modes_consistent(two_link):
    cfg = parse_config(TINY2)
    gp = experiments.load_model(two_link)
    radius = dict(experiments.bound_report(cfg, gp, "radius").rows)
    acc_cfg = replace(cfg, bounds=replace(cfg.bounds, target_r=radius["r"]))
    acc = dict(experiments.bound_report(acc_cfg, gp, "accuracy_for_radius").rows)
    assert acc["max_Delta_bar"] == pytest.approx(radius["Delta_bar"], rel=1e-9)
    kd = [dict(experiments.bound_report(replace(cfg, bounds=replace(cfg.bounds, target_r=r)),
                                        gp, "gains_for_radius").rows)["k_d1_required"]
          for r in (1e10, 1e9, 1e8, 1.0)]
    # tighter radius targets need larger damping gains; an unreachable one reports nan
    assert np.isnan(kd[-1])
    assert all(np.isfinite(kd[:-1])) and kd[:-1] == sorted(kd[:-1])


def test_reproduce_rejects_unknown_target():
    with pytest.raises(SystemExit):
        cli.main(["reproduce", "table9"])
