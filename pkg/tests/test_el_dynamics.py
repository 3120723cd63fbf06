import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, strategies as st

from gpctc import DynamicsSolveError
from gpctc.el_dynamics import (ElEstimates, ElModel, StateTriple, coriolis_from_inertia,
                               estimate_bound_constants, forward_dynamics, inertia_rate,
                               one_dof_estimates, one_dof_model, onedof_disturbance,
                               residual_tau, stack_p, two_link_case_study, two_link_disturbance,
                               two_link_model)

PARAMS = (1.0, 1.0, 1.0, 1.0)
EST_PARAMS = (0.9, 1.1, 0.9, 1.1)


def _lagrangian_oracle():
    """Symbolic H, C, g of the planar arm from T and V; built once."""
    q1, q2, v1, v2, m1, m2, l1, l2, grav = sp.symbols("q1 q2 v1 v2 m1 m2 l1 l2 grav", real=True)
    q, v = sp.Matrix([q1, q2]), sp.Matrix([v1, v2])
    p1 = sp.Matrix([l1 / 2 * sp.cos(q1), l1 / 2 * sp.sin(q1)])
    p2 = sp.Matrix([l1 * sp.cos(q1) + l2 / 2 * sp.cos(q1 + q2), l1 * sp.sin(q1) + l2 / 2 * sp.sin(q1 + q2)])
    vel1, vel2 = p1.jacobian(q) * v, p2.jacobian(q) * v
    T = sp.Rational(1, 2) * (m1 * vel1.dot(vel1) + m2 * vel2.dot(vel2))
    V = grav * (m1 * p1[1] + m2 * p2[1])
    H = sp.simplify(sp.hessian(T, v))
    C = sp.zeros(2, 2)
    for i in range(2):
        for j in range(2):
            C[i, j] = sum(sp.Rational(1, 2) * (sp.diff(H[i, j], q[k]) + sp.diff(H[i, k], q[j])
                                               - sp.diff(H[j, k], q[i])) * v[k] for k in range(2))
    g = sp.Matrix([sp.diff(V, qi) for qi in q])
    args = (q1, q2, v1, v2, m1, m2, l1, l2, grav)
    return tuple(sp.lambdify(args, M, "numpy") for M in (H, C, g))


ORACLE_H, ORACLE_C, ORACLE_G = _lagrangian_oracle()


def oracle(q, qd, params=PARAMS, grav=9.81):
    args = (*q, *qd, *params, grav)
    return (np.array(ORACLE_H(*args), float), np.array(ORACLE_C(*args), float),
            np.array(ORACLE_G(*args), float).ravel())


angles = st.floats(-math.pi, math.pi)
rates = st.floats(-3.0, 3.0)


# --------------------------------------------------------------- two-link

def test_inertia_at_zero_matches_lagrangian_oracle():
    model = two_link_model(*PARAMS)
    H, _, _ = oracle([0.0, 0.0], [0.0, 0.0])
    assert np.allclose(model.inertia(np.zeros(2)), H, atol=1e-12)


@given(angles, angles, rates, rates, st.tuples(*[st.floats(0.3, 2.0)] * 4))
def test_two_link_matches_symbolic_model(a, b, c, d, params):
    model = two_link_model(*params)
    q, qd = np.array([a, b]), np.array([c, d])
    H, C, g = oracle(q, qd, params)
    assert np.allclose(model.inertia(q), H, atol=1e-12)
    assert np.allclose(model.coriolis(q, qd), C, atol=1e-12)
    assert np.allclose(model.gravity(q), g, atol=1e-12)


@given(angles, angles, rates, rates)
def test_christoffel_construction_matches_symbolic(a, b, c, d):
    model = two_link_model(*PARAMS)
    q, qd = np.array([a, b]), np.array([c, d])
    _, C, _ = oracle(q, qd)
    assert np.allclose(coriolis_from_inertia(model.inertia, q, qd), C, atol=1e-6)


def test_christoffel_degenerate_cases():
    assert np.allclose(coriolis_from_inertia(lambda q: np.eye(1), [0.3], [2.0]), 0.0)
    model = two_link_model(*PARAMS)
    assert np.allclose(coriolis_from_inertia(model.inertia, [0.4, -1.0], [0.0, 0.0]), 0.0)


def test_skew_symmetry_1000_states():
    r = np.random.default_rng(0)
    for model in (two_link_model(*PARAMS), two_link_model(*EST_PARAMS)):
        for _ in range(500):
            q, qd, x = r.uniform(-math.pi, math.pi, 2), r.uniform(-3, 3, 2), r.normal(size=2)
            N = inertia_rate(model.inertia, q, qd) - 2 * model.coriolis(q, qd)
            assert abs(x @ N @ x) < 1e-8 * (x @ x) * (1 + np.linalg.norm(qd))


def test_inertia_symmetric_positive_definite():
    model = two_link_model(*PARAMS)
    for q in np.random.default_rng(1).uniform(-math.pi, math.pi, (100, 2)):
        H = model.inertia(q)
        assert np.allclose(H, H.T)
        assert np.linalg.eigvalsh(H)[0] > 0


@pytest.mark.parametrize("bad", [(0, 1, 1, 1), (1, -1, 1, 1), (1, 1, 0, 1), (1, 1, 1, -2)])
def test_nonpositive_parameters_rejected(bad):
    with pytest.raises(ValueError):
        two_link_model(*bad)


def test_unforced_energy_conservation():
    full = two_link_model(*PARAMS, gravity=0.0)
    q, qd = np.array([0.3, -0.5]), np.array([1.0, -0.7])
    e0 = full.kinetic_energy(q, qd)
    dt = 1e-4

    def f(x):
        return np.r_[x[2:], forward_dynamics(full, x[:2], x[2:], np.zeros(2))]

    x = np.r_[q, qd]
    for _ in range(10_000):
        k1 = f(x)
        k2 = f(x + dt / 2 * k1)
        k3 = f(x + dt / 2 * k2)
        k4 = f(x + dt * k3)
        x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    assert abs(full.kinetic_energy(x[:2], x[2:]) - e0) / e0 < 1e-5


# ------------------------------------------------------------------ 1-DOF

def _onedof_transcription(c, q, qd):
    x = q - c
    return (qd**2 * math.sin(x) - math.sin(c)) / (math.cos(x) - 1.1 / math.cos(x))


def test_onedof_zero_case():
    assert onedof_disturbance([0.0, 0.0, 0.0], 0.0)[0] == 0.0


def test_onedof_guarded_near_singular_cosine():
    c = math.pi / 2
    v = onedof_disturbance([0.0, 0.0, 0.0], c)[0]
    assert math.isfinite(v) and abs(v) < 1e-9
    for eps in (1e-6, -1e-6):
        q = c + math.acos(eps)  # cos(q - c) = eps
        assert abs(_onedof_transcription(c, q, 0.0)) < 1e-5
        assert abs(onedof_disturbance([0.0, 0.0, q], c)[0]) < 1e-5


@given(st.floats(0, 2 * math.pi), st.floats(-2, 2), st.floats(-2, 2))
def test_onedof_matches_transcription(c, q, qd):
    if abs(math.cos(q - c)) < 1e-6:
        return
    assert onedof_disturbance([0.0, qd, q], c)[0] == pytest.approx(_onedof_transcription(c, q, qd),
                                                                   abs=1e-12, rel=1e-12)


def test_onedof_denominator_bounded_away_from_zero():
    x = np.linspace(-10, 10, 100_001)
    cx = np.cos(x)
    cx = cx[np.abs(cx) > 1e-12]
    assert np.abs(cx - 1.1 / cx).min() >= 0.1 - 1e-12


def test_onedof_structure():
    m = one_dof_model(1.3)
    assert m.inertia([0.0])[0, 0] == 1.0 and m.coriolis([0.0], [5.0])[0, 0] == 1.0
    assert m.gravity([0.7])[0] == 0.7
    p = [0.0, 0.4, -0.2]
    assert m.f_u(p)[0] == -onedof_disturbance(p, 1.3)[0]


# ----------------------------------------------------------------- residual

def test_residual_zero_for_perfect_model():
    model = two_link_model(*PARAMS)
    est = ElEstimates.from_model(model)
    p = np.random.default_rng(2).normal(size=6)
    assert np.allclose(residual_tau(model, est, p), 0.0)


def test_residual_constant_gravity_offset():
    model = two_link_model(*PARAMS)
    est = ElEstimates(2, model.inertia, model.coriolis, lambda q: model.gravity(q) + 1.0)
    assert np.allclose(residual_tau(model, est, np.ones(6)), [-1.0, -1.0])


def test_residual_case_study_at_origin():
    model, est = two_link_case_study(PARAMS, EST_PARAMS)
    p = np.zeros(6)
    expected = -model.f_u(p) + (model.gravity(np.zeros(2)) - est.gravity(np.zeros(2)))
    assert np.allclose(residual_tau(model, est, p), expected, atol=1e-14)
    # term-by-term with the symbolic oracle; f_u(0) = -d(0) = -[1, 0]
    _, _, g_true = oracle([0, 0], [0, 0], PARAMS)
    _, _, g_est = oracle([0, 0], [0, 0], EST_PARAMS)
    assert np.allclose(residual_tau(model, est, p), np.array([1.0, 0.0]) + g_true - g_est, atol=1e-12)


@given(st.integers(0, 10_000))
def test_residual_algebraic_consistency(seed):
    model, est = two_link_case_study(PARAMS, EST_PARAMS)
    p = np.random.default_rng(seed).uniform(-2, 2, 6)
    qdd, qd, q = p[:2], p[2:4], p[4:]
    lhs = residual_tau(model, est, p) + est.torque(qdd, qd, q) - model.inverse_dynamics(qdd, qd, q)
    assert np.allclose(lhs, 0.0, atol=1e-12)


def test_residual_dimension_mismatch():
    model, est = two_link_case_study()
    with pytest.raises(ValueError):
        residual_tau(model, est, np.zeros(3))


# ---------------------------------------------------------- forward dynamics

def test_equilibrium_input_gives_zero_acceleration():
    model = two_link_model(*PARAMS)
    q, qd = np.array([0.2, 0.5]), np.array([-0.3, 0.8])
    u = model.coriolis(q, qd) @ qd + model.gravity(q)
    assert np.allclose(forward_dynamics(model, q, qd, u), 0.0, atol=1e-12)


@given(st.floats(0, 2 * math.pi), st.floats(-2, 2), st.floats(-2, 2), st.floats(-5, 5))
def test_onedof_closed_form(c, q, qd, u):
    model = one_dof_model(c)
    expected = u - qd - q - onedof_disturbance([0.0, qd, q], c)[0]
    assert forward_dynamics(model, [q], [qd], [u])[0] == pytest.approx(expected, abs=1e-10)


@given(st.integers(0, 10_000))
def test_implicit_case_study_round_trip(seed):
    r = np.random.default_rng(seed)
    model, _ = two_link_case_study(PARAMS, EST_PARAMS)
    q, qd, u = r.uniform(-2, 2, 2), r.uniform(-2, 2, 2), r.uniform(-20, 20, 2)
    qdd = forward_dynamics(model, q, qd, u)
    # substitute back into the equation of motion
    assert np.allclose(model.inverse_dynamics(qdd, qd, q), u, atol=1e-9)


def test_non_convergence_raises():
    # a steep non-smooth f_u(qdd) defeats the iteration within a tiny budget
    model = ElModel(1, lambda q: np.eye(1), lambda q, qd: np.zeros((1, 1)), lambda q: np.zeros(1),
                    lambda p: np.array([np.sign(p[0]) * abs(p[0]) ** 0.5]) * 1e6)
    with pytest.raises(DynamicsSolveError) as err:
        forward_dynamics(model, [0.0], [0.0], [1.0], max_iter=5)
    assert math.isfinite(err.value.residual)


# --------------------------------------------------------- bound constants

def test_bound_constants_cover_samples():
    _, est = two_link_case_study()
    h1, h2, k_C = estimate_bound_constants(est, [-1, -1], [1, 1])
    r = np.random.default_rng(4)
    for _ in range(200):
        q = r.uniform(-1, 1, 2)
        qd = r.normal(size=2)
        x = r.normal(size=2)
        val = x @ est.inertia(q) @ x
        assert h1 * (x @ x) <= val <= h2 * (x @ x)
        assert np.linalg.norm(est.coriolis(q, qd), 2) <= k_C * np.linalg.norm(qd)


def test_onedof_has_no_linear_coriolis_bound():
    assert math.isinf(estimate_bound_constants(one_dof_estimates(), [-1], [1])[2])


def test_state_triple_roundtrip():
    s = StateTriple([1.0, 2.0], [3.0, 4.0], [5.0, 6.0])
    assert np.array_equal(s.p, stack_p([1, 2], [3, 4], [5, 6]))
    assert StateTriple.from_p(s.p, 2).q.tolist() == [5.0, 6.0]


def test_case_study_disturbance_values():
    p = np.array([0.5, 0.0, 0.3, -0.2, 0.1, 0.0])
    d = two_link_disturbance(p)
    assert d[0] == pytest.approx(math.sin(-0.4) + math.cos(0.2) + 0.5)
    assert d[1] == pytest.approx(math.sin(-0.4) + 2 * math.sin(0.3))
