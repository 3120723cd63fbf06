"""Acceptance suite: one pass/fail line per criterion.

The reproductions run the bundled configs end to end and take several minutes
on one core. Run standalone with ``pytest tests/test_acceptance.py -v``.
"""
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from gpctc import cli, experiments
from gpctc.controller import Controller, DesiredTrajectory, GainSchedule
from gpctc.el_dynamics import ElEstimates, two_link_model
from gpctc.sim import simulate

pytestmark = pytest.mark.slow

TESTS = Path(__file__).parent
TABLE1_FILES = ("table1.csv", "table1_checks.csv")


def _reproduce(which, out):
    t0 = time.perf_counter()
    code = cli.main(["reproduce", which, "--out", str(out)])
    return code, time.perf_counter() - t0


def _checks(out, name):
    rows = (Path(out) / f"{name}_checks.csv").read_text().splitlines()[1:]
    return [r for r in rows if r.endswith(",FAIL")]


@pytest.fixture(scope="module")
def table1_runs(tmp_path_factory):
    runs = []
    for _ in range(2):
        out = tmp_path_factory.mktemp("table1")
        code, secs = _reproduce("table1", out)
        runs.append((out, code, secs))
    return runs


def test_criterion_1_table1(table1_runs, acceptance):
    out, code, secs = table1_runs[0]
    failed = _checks(out, "table1")
    detail = f"{len(failed)} of 12 checks failed, tolerance 25%, {secs:.0f} s, expected < 300 s"
    assert acceptance(1, "table1 ordering and values", code == cli.EXIT_OK and not failed, detail), \
        "\n".join(failed)


def test_criterion_2_fig3(tmp_path, acceptance):
    code, secs = _reproduce("fig3", tmp_path)
    failed = _checks(tmp_path, "fig3")
    ok = code == cli.EXIT_OK and not failed and secs < 600
    detail = f"{len(failed)} checks failed, median ratio <= 0.70, fractions >= 0.75, {secs:.0f} s of 600 s"
    assert acceptance(2, "fig3 randomized study", ok, detail), "\n".join(failed)


def test_criterion_3_bound_coverage(tmp_path, acceptance):
    code, secs = _reproduce("bound_coverage", tmp_path)
    rows = dict(line.split(",")[:2] for line in
                (tmp_path / "bound_coverage.csv").read_text().splitlines()[1:])
    coverage = float(rows["coverage"])
    ok = code == cli.EXIT_OK and coverage >= 0.9
    assert acceptance(3, "model-error bound coverage", ok,
                      f"coverage {coverage:.4f} >= 0.9 over {int(float(rows['points']))} points")


def test_criterion_4_perfect_model_tracking(acceptance):
    model = two_link_model(1.0, 1.0, 1.0, 1.0)
    est = ElEstimates.from_model(model)
    des = DesiredTrajectory.sinusoid([1.0, 1.0], [0.0, np.pi / 2])
    ctrl = Controller(est, GainSchedule.build("classic_static", 2, 10.0, 10.0), des)
    t0 = time.perf_counter()
    traj = simulate(model, ctrl, des, [0.3, 0.5], [0.0, 0.0], 20.0, 1e-3)
    secs = time.perf_counter() - t0
    err = float(np.linalg.norm(traj.e[-1]))
    ok = err < 1e-3 and secs < 30
    assert acceptance(4, "perfect-model tracking", ok, f"|e(20 s)| = {err:.3g} < 1e-3, {secs:.1f} s of 30 s")


PROPERTY_SUITES = {
    "GP": ["test_gp_core.py::test_gram_psd_and_symmetric",
           "test_gp_core.py::test_sine_interpolation",
           "test_gp_core.py::test_variance_monotone_under_added_data",
           "test_gp_core.py::test_lml_gradient_finite_differences",
           "test_gp_core.py::test_explicit_inverse_oracle"],
    "dynamics": ["test_el_dynamics.py::test_skew_symmetry_1000_states",
                 "test_el_dynamics.py::test_implicit_case_study_round_trip",
                 "test_sim.py::test_rk4_order"],
    "bounds": ["test_bounds.py::test_greedy_within_submodular_guarantee",
               "test_bounds.py::test_gain_budget_three_of_eight",
               "test_bounds.py::test_radius_zero_and_linear",
               "test_bounds.py::test_schur_matches_eigendecomposition",
               "test_bounds.py::test_lyapunov_positive_and_lower_bounded",
               "test_bounds.py::test_quadrature_matches_closed_form_constant_gain"],
}


@pytest.mark.parametrize("suite", sorted(PROPERTY_SUITES))
def test_criterion_5_property_suites(suite, acceptance):
    ids = [str(TESTS / node) for node in PROPERTY_SUITES[suite]]
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *ids],
                          capture_output=True, text=True, cwd=TESTS.parent)
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    assert acceptance(5, f"{suite} property suite standalone", proc.returncode == 0, summary), proc.stdout


def test_criterion_6_table1_deterministic(table1_runs, acceptance):
    (a, _, _), (b, _, _) = table1_runs
    same = [(a / f).read_bytes() == (b / f).read_bytes() for f in TABLE1_FILES]
    assert acceptance(6, "table1 byte-identical reruns", all(same),
                      ", ".join(f"{f} {'identical' if s else 'differs'}" for f, s in zip(TABLE1_FILES, same)))
