"""Euler-Lagrange models ``H(q) qdd + C(q, qd) qd + g(q) - f_u(p) = u``.

``p`` always denotes the stacked vector ``[qdd, qd, q]`` of length ``3n``.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DynamicsSolveError

log = logging.getLogger(__name__)

GRAVITY = 9.81
FD_STEP = 1e-6

MatrixFn = Callable[[np.ndarray], np.ndarray]


def stack_p(q_ddot, q_dot, q) -> np.ndarray:
    return np.concatenate([np.atleast_1d(q_ddot), np.atleast_1d(q_dot), np.atleast_1d(q)]).astype(float)


def split_p(p, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=float)
    return p[:n], p[n:2 * n], p[2 * n:3 * n]


@dataclass(frozen=True)
class StateTriple:
    q_ddot: np.ndarray
    q_dot: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        for name in ("q_ddot", "q_dot", "q"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if not (self.q_ddot.shape == self.q_dot.shape == self.q.shape) or self.q.ndim != 1:
            raise ValueError("q_ddot, q_dot and q must be vectors of equal length")

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def p(self) -> np.ndarray:
        return stack_p(self.q_ddot, self.q_dot, self.q)

    @classmethod
    def from_p(cls, p, n: int) -> "StateTriple":
        return cls(*split_p(p, n))



@dataclass
class ElModel:
    """Evaluable Lagrangian system.

    ``unknown`` follows the sign convention of the equation in the module
    docstring (it enters the left-hand side with a minus sign). Set
    ``unknown_uses_qdd=False`` when it ignores ``qdd``; the forward
    dynamics then skip the implicit solve.
    """

    n: int
    inertia: Callable[[np.ndarray], np.ndarray]
    coriolis: Callable[[np.ndarray, np.ndarray], np.ndarray]
    gravity: Callable[[np.ndarray], np.ndarray]
    unknown: Callable[[np.ndarray], np.ndarray] | None = None
    name: str = "custom"
    params: dict = field(default_factory=dict)
    unknown_uses_qdd: bool = True

    def f_u(self, p) -> np.ndarray:
        if self.unknown is None:
            return np.zeros(self.n)
        return np.asarray(self.unknown(np.asarray(p, dtype=float)), dtype=float).reshape(self.n)

    def inverse_dynamics(self, q_ddot, q_dot, q) -> np.ndarray:
        """Torque ``u`` that produces ``q_ddot`` at ``(q, q_dot)``."""
        q_ddot, q_dot, q = (np.atleast_1d(np.asarray(a, dtype=float)) for a in (q_ddot, q_dot, q))
        return (self.inertia(q) @ q_ddot + self.coriolis(q, q_dot) @ q_dot
                + self.gravity(q) - self.f_u(stack_p(q_ddot, q_dot, q)))

    def without_unknown(self) -> "ElModel":
        return ElModel(self.n, self.inertia, self.coriolis, self.gravity, None,
                       self.name, dict(self.params))

    def kinetic_energy(self, q, q_dot) -> float:
        q_dot = np.atleast_1d(q_dot)
        return 0.5 * float(q_dot @ self.inertia(np.atleast_1d(q)) @ q_dot)


@dataclass
class ElEstimates:
    """Parametric model ``H^, C^, g^`` with its bound constants.

    ``h1 |x|^2 <= x^T H^(q) x <= h2 |x|^2`` and ``|C^(q, qd)| <= k_C |qd|``.
    """

    n: int
    inertia: Callable[[np.ndarray], np.ndarray]
    coriolis: Callable[[np.ndarray, np.ndarray], np.ndarray]
    gravity: Callable[[np.ndarray], np.ndarray]
    h1: float = float("nan")
    h2: float = float("nan")
    k_C: float = float("nan")
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def torque(self, q_ddot, q_dot, q) -> np.ndarray:
        return self.inertia(q) @ q_ddot + self.coriolis(q, q_dot) @ q_dot + self.gravity(q)

    @classmethod
    def from_model(cls, model: ElModel, **kw) -> "ElEstimates":
        return cls(model.n, model.inertia, model.coriolis, model.gravity,
                   name=model.name, params=dict(model.params), **kw)

    def with_bounds(self, h1: float, h2: float, k_C: float) -> "ElEstimates":
        return ElEstimates(self.n, self.inertia, self.coriolis, self.gravity,
                           h1, h2, k_C, self.name, dict(self.params))


def coriolis_from_inertia(inertia: MatrixFn, q, q_dot, h: float = FD_STEP) -> np.ndarray:
    """Christoffel-symbol Coriolis matrix with central-difference partials of ``H``."""
    q = np.atleast_1d(np.asarray(q, dtype=float))
    q_dot = np.atleast_1d(np.asarray(q_dot, dtype=float))
    n = q.size
    dH = np.empty((n, n, n))  # dH[k] = dH/dq_k
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        dH[k] = (inertia(q + e) - inertia(q - e)) / (2 * h)
    # Gamma_ijk = 1/2 (dH_ij/dq_k + dH_ik/dq_j - dH_jk/dq_i)
    gamma = 0.5 * (np.einsum("kij->ijk", dH) + np.einsum("jik->ijk", dH) - np.einsum("ijk->ijk", dH))
    return gamma @ q_dot


def inertia_rate(inertia: MatrixFn, q, q_dot, h: float = FD_STEP) -> np.ndarray:
    """``dH/dt`` along ``q_dot`` by central differences."""
    q = np.atleast_1d(np.asarray(q, dtype=float))
    q_dot = np.atleast_1d(np.asarray(q_dot, dtype=float))
    return (inertia(q + h * q_dot) - inertia(q - h * q_dot)) / (2 * h)


# ------------------------------------------------------------------ 2-link arm

def two_link_model(m1: float, m2: float, l1: float, l2: float,
                   gravity: float = GRAVITY) -> ElModel:
    """Planar 2-link arm with point masses at the link midpoints.

    Joint angles are measured from the horizontal x-axis (relative for link 2);
    gravity acts along -y. Returned without unknown dynamics.
    """
    for name, val in (("m1", m1), ("m2", m2), ("l1", l1), ("l2", l2)):
        if not val > 0:
            raise ValueError(f"{name} must be positive, got {val}")
    lc1, lc2 = l1 / 2, l2 / 2
    a = m1 * lc1**2 + m2 * (l1**2 + lc2**2)
    b = m2 * l1 * lc2
    d = m2 * lc2**2

    def H(q):
        c2 = np.cos(q[1])
        return np.array([[a + 2 * b * c2, d + b * c2],
                         [d + b * c2, d]])

    def C(q, qd):
        s2 = np.sin(q[1])
        return np.array([[-b * s2 * qd[1], -b * s2 * (qd[0] + qd[1])],
                         [b * s2 * qd[0], 0.0]])

    def g(q):
        c12 = np.cos(q[0] + q[1])
        return gravity * np.array([(m1 * lc1 + m2 * l1) * np.cos(q[0]) + m2 * lc2 * c12,
                                   m2 * lc2 * c12])

    return ElModel(2, H, C, g, None, "two_link",
                   dict(m1=m1, m2=m2, l1=l1, l2=l2, gravity=gravity))


def two_link_disturbance(p) -> np.ndarray:
    """Unknown load torque ``d(p)`` of the 2-link benchmark."""
    qdd1 = p[0]
    qd1, qd2 = p[2], p[3]
    q1 = p[4]
    return np.array([np.sin(2 * qd2) + np.cos(2 * q1) + qdd1,
                     np.sin(2 * qd2) + 2 * np.sin(qd1)])


def two_link_case_study(true=(1.0, 1.0, 1.0, 1.0), estimate=(0.9, 1.1, 0.9, 1.1),
                        disturbance: bool = True) -> tuple[ElModel, ElEstimates]:
    """True arm with load torque plus the perturbed parametric estimate.

    The load torque is added on the actuator side, ``u = H qdd + C qd + g + d(p)``,
    so the model's ``unknown`` is ``-d``.
    """
    model = two_link_model(*true)
    if disturbance:
        model.unknown = lambda p: -two_link_disturbance(p)
    est = ElEstimates.from_model(two_link_model(*estimate))
    est.name = "two_link_estimate"
    return model, est


# ------------------------------------------------------------------- 1-DOF

DENOM_GUARD = 1e-12


def onedof_disturbance(p, c: float) -> np.ndarray:
    """``(qd^2 sin(q-c) - sin c) / (cos(q-c) - 1.1/cos(q-c))``.

    As ``cos(q-c) -> 0`` the denominator diverges and the value tends to 0;
    ``|cos| < 1e-12`` is evaluated at the guard instead.
    """
    qd, q = float(p[1]), float(p[2])
    cx = np.cos(q - c)
    if abs(cx) < DENOM_GUARD:
        cx = DENOM_GUARD if cx >= 0 else -DENOM_GUARD
    num = qd**2 * np.sin(q - c) - np.sin(c)
    return np.array([num / (cx - 1.1 / cx)])


def one_dof_model(c: float) -> ElModel:
    """``u = qdd + qd + q + d(p)`` with the randomized load ``d`` (``unknown = -d``)."""
    c = float(c)
    return ElModel(
        1,
        lambda q: np.array([[1.0]]),
        lambda q, qd: np.array([[1.0]]),
        lambda q: np.array([q[0]]),
        lambda p: -onedof_disturbance(p, c),
        "one_dof",
        dict(c=c),
        unknown_uses_qdd=False,
    )


def one_dof_estimates() -> ElEstimates:
    """``H^ = C^ = 1`` and ``g^(q) = q``."""
    return ElEstimates(1, lambda q: np.array([[1.0]]), lambda q, qd: np.array([[1.0]]),
                       lambda q: np.array([q[0]]), name="one_dof_estimate")


SYSTEMS = {"one_dof", "two_link"}


# --------------------------------------------------------------- operations

def residual_tau(true_model: ElModel, est: ElEstimates, p) -> np.ndarray:
    """``(H-H^) qdd + (C-C^) qd + (g-g^) - f_u(p)``."""
    n = true_model.n
    if est.n != n or np.size(p) != 3 * n:
        raise ValueError("dimension mismatch between models and p")
    qdd, qd, q = split_p(p, n)
    dH = true_model.inertia(q) - est.inertia(q)
    dC = true_model.coriolis(q, qd) - est.coriolis(q, qd)
    dg = true_model.gravity(q) - est.gravity(q)
    return dH @ qdd + dC @ qd + dg - true_model.f_u(p)


def _solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    if A.shape == (1, 1):
        return b / A[0, 0]
    return np.linalg.solve(A, b)


def forward_dynamics(model: ElModel, q, q_dot, u, tol: float = 1e-12,
                     max_iter: int = 100) -> np.ndarray:
    """Solve ``H qdd + C qd + g - f_u([qdd, qd, q]) = u`` for ``qdd``.

    ``f_u`` may depend on ``qdd``; the implicit equation is solved by Newton
    iteration with a central-difference Jacobian, started from
    ``H^{-1}(u - C qd - g)``.
    """
    q = np.atleast_1d(np.asarray(q, dtype=float))
    q_dot = np.atleast_1d(np.asarray(q_dot, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    n = model.n
    H = model.inertia(q)
    rhs = u - model.coriolis(q, q_dot) @ q_dot - model.gravity(q)
    if model.unknown is None:
        return _solve(H, rhs)
    if not model.unknown_uses_qdd:
        return _solve(H, rhs + model.f_u(stack_p(np.zeros(n), q_dot, q)))
    qdd = _solve(H, rhs)

    def residual(x):
        return H @ x - model.f_u(stack_p(x, q_dot, q)) - rhs

    def jacobian(x):
        J = np.empty((n, n))
        for k in range(n):
            e = np.zeros(n)
            e[k] = FD_STEP
            J[:, k] = (residual(x + e) - residual(x - e)) / (2 * FD_STEP)
        return J

    scale = 1.0 + np.abs(rhs).max()
    r = residual(qdd)
    J = None
    for it in range(max_iter):
        if np.abs(r).max() <= tol * scale:
            return qdd
        # chord steps: the Jacobian is refreshed only every few iterations
        if J is None or it % 4 == 0:
            J = jacobian(qdd)
        try:
            qdd = qdd - np.linalg.solve(J, r)
        except np.linalg.LinAlgError as exc:
            raise DynamicsSolveError("singular effective inertia", float(np.abs(r).max())) from exc
        r = residual(qdd)
    if np.abs(r).max() <= tol * scale:
        return qdd
    raise DynamicsSolveError(
        f"acceleration solve did not converge in {max_iter} iterations",
        float(np.abs(r).max()))


def estimate_bound_constants(est: ElEstimates, q_low, q_high,
                             resolution: int = 25, margin: float = 0.05) -> tuple[float, float, float]:
    """Sample ``H^`` and ``C^`` over a box to get ``(h1, h2, k_C)``.

    ``h1`` shrinks and ``h2``, ``k_C`` grow by ``margin``. ``k_C`` is the
    largest ``|C^(q, v)|`` over unit directions ``v``; it is ``inf`` when
    ``C^(q, 0) != 0`` since no linear bound can hold then.
    """
    n = est.n
    q_low = np.broadcast_to(np.asarray(q_low, dtype=float), (n,))
    q_high = np.broadcast_to(np.asarray(q_high, dtype=float), (n,))
    axes = [np.linspace(lo, hi, resolution) for lo, hi in zip(q_low, q_high)]
    eig_lo, eig_hi, kc = np.inf, 0.0, 0.0
    rng = np.random.default_rng(0)
    dirs = np.vstack([np.eye(n), rng.standard_normal((8 * n, n))])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    linear = True
    for q in itertools.product(*axes):
        q = np.array(q)
        w = np.linalg.eigvalsh(0.5 * (est.inertia(q) + est.inertia(q).T))
        eig_lo = min(eig_lo, w[0])
        eig_hi = max(eig_hi, w[-1])
        if np.linalg.norm(est.coriolis(q, np.zeros(n)), 2) > 1e-12:
            linear = False
            continue
        for v in dirs:
            kc = max(kc, np.linalg.norm(est.coriolis(q, v), 2))
    if not linear:
        log.warning("C^(q, 0) != 0: no finite k_C exists for %s", est.name)
        kc = np.inf
    return (1 - margin) * eig_lo, (1 + margin) * eig_hi, (1 + margin) * kc
