"""Computed-torque control with GP compensation and variance-scheduled gains."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .el_dynamics import ElEstimates, StateTriple
from .gp_core import MultiOutputGp, SubsetSpec

KINDS = ("classic_static", "gpr_static", "gpr_variable")


def _as_matrix(K, n: int) -> np.ndarray:
    K = np.asarray(K, dtype=float)
    if K.ndim == 0:
        return float(K) * np.eye(n)
    if K.ndim == 1:
        return np.diag(K)
    return K


@dataclass
class GainSchedule:
    """``K_p = Kp_base + Kp_scale * Var_p`` and ``K_d = Kd_base + Kd_scale * Var_d``.

    The variance terms are diagonal, so each diagonal gain entry grows with
    the model uncertainty of the matching output.
    """

    kind: str
    Kp_base: np.ndarray
    Kd_base: np.ndarray
    Kp_scale: float = 0.0
    Kd_scale: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown controller kind {self.kind!r}; valid kinds: {', '.join(KINDS)}")
        self.Kp_base = np.atleast_2d(np.asarray(self.Kp_base, dtype=float))
        self.Kd_base = np.atleast_2d(np.asarray(self.Kd_base, dtype=float))
        for name in ("Kp_base", "Kd_base"):
            K = getattr(self, name)
            if K.shape[0] != K.shape[1] or not np.allclose(K, K.T):
                raise ValueError(f"{name} must be a symmetric square matrix")
        if self.Kp_scale < 0 or self.Kd_scale < 0:
            raise ValueError("gain scales must be nonnegative")

    @classmethod
    def build(cls, kind: str, n: int, Kp, Kd, Kp_scale: float = 0.0,
              Kd_scale: float = 0.0) -> "GainSchedule":
        return cls(kind, _as_matrix(Kp, n), _as_matrix(Kd, n), Kp_scale, Kd_scale)

    @property
    def n(self) -> int:
        return self.Kp_base.shape[0]

    @property
    def uses_gp(self) -> bool:
        return self.kind != "classic_static"

    @property
    def variable(self) -> bool:
        return self.kind == "gpr_variable"

    def Kp(self, var_p=None) -> np.ndarray:
        if not self.variable or var_p is None:
            return self.Kp_base
        return self.Kp_base + self.Kp_scale * np.diag(np.asarray(var_p, dtype=float))

    def Kd(self, var_d=None) -> np.ndarray:
        if not self.variable or var_d is None:
            return self.Kd_base
        return self.Kd_base + self.Kd_scale * np.diag(np.asarray(var_d, dtype=float))

    def bound_constants(self, max_variance: float | np.ndarray = 0.0) -> dict:
        """``k_p1, k_p2, k_d1, k_d2`` over variances in ``[0, max_variance]``."""
        max_var = float(np.max(max_variance)) if self.variable else 0.0
        wp = np.linalg.eigvalsh(self.Kp_base)
        wd = np.linalg.eigvalsh(self.Kd_base)
        return dict(k_p1=wp[0], k_p2=wp[-1] + self.Kp_scale * max_var,
                    k_d1=wd[0], k_d2=wd[-1] + self.Kd_scale * max_var)


@dataclass
class DesiredTrajectory:
    q_d: Callable[[float], np.ndarray]
    qd_d: Callable[[float], np.ndarray]
    qdd_d: Callable[[float], np.ndarray]
    q_bound: float = float("inf")
    qd_bound: float = float("inf")
    params: dict = field(default_factory=dict)

    @classmethod
    def sinusoid(cls, amplitude, phase, omega=1.0, offset=0.0) -> "DesiredTrajectory":
        """``q_d(t) = offset + amplitude * sin(omega t + phase)`` per joint."""
        A = np.atleast_1d(np.asarray(amplitude, dtype=float))
        ph = np.broadcast_to(np.asarray(phase, dtype=float), A.shape).copy()
        w = np.broadcast_to(np.asarray(omega, dtype=float), A.shape).copy()
        off = np.broadcast_to(np.asarray(offset, dtype=float), A.shape).copy()
        return cls(
            lambda t: off + A * np.sin(w * t + ph),
            lambda t: A * w * np.cos(w * t + ph),
            lambda t: -A * w**2 * np.sin(w * t + ph),
            q_bound=float(np.linalg.norm(np.abs(off) + np.abs(A))),
            qd_bound=float(np.linalg.norm(np.abs(A * w))),
            params=dict(amplitude=A.tolist(), phase=ph.tolist(), omega=w.tolist(), offset=off.tolist()),
        )

    def sample(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (np.atleast_1d(self.q_d(t)), np.atleast_1d(self.qd_d(t)), np.atleast_1d(self.qdd_d(t)))

    def check_bounds(self, horizon: float, samples: int = 2001) -> bool:
        ts = np.linspace(0.0, horizon, samples)
        qn = max(np.linalg.norm(self.q_d(t)) for t in ts)
        vn = max(np.linalg.norm(self.qd_d(t)) for t in ts)
        return qn <= self.q_bound + 1e-12 and vn <= self.qd_bound + 1e-12


@dataclass
class ControlDiagnostics:
    Kp: np.ndarray
    Kd: np.ndarray
    mean_comp: np.ndarray
    var_p: np.ndarray | None
    var_d: np.ndarray | None


def var_p_diag(gp: MultiOutputGp, q) -> np.ndarray:
    """Entry ``i``: variance of output ``i`` given only the coordinate ``q_i``."""
    n = gp.output_dim
    q = np.atleast_1d(q)
    out = np.empty(n)
    for i in range(n):
        model = gp.marginal(SubsetSpec((2 * n + i,)))[i]
        out[i] = model.variance_point(q[i:i + 1])
    return out


def var_d_diag(gp: MultiOutputGp, q_dot, q) -> np.ndarray:
    """Per-output variance given ``(qd, q)``."""
    n = gp.output_dim
    spec = SubsetSpec(tuple(range(n, 3 * n)))
    x = np.concatenate([np.atleast_1d(q_dot), np.atleast_1d(q)])
    return gp.marginal_variance_point(spec, x)


def _control(est: ElEstimates, gp: MultiOutputGp | None, gains: GainSchedule,
             meas: StateTriple, des: DesiredTrajectory, t: float,
             held: ControlDiagnostics | None = None):
    q, qd = meas.q, meas.q_dot
    q_d, qd_d, qdd_d = des.sample(t)
    e = q - q_d
    e_dot = qd - qd_d
    if gp is not None and gains.uses_gp:
        mean = gp.mean_point(meas.p)
    else:
        mean = np.zeros(meas.n)
    if held is not None:
        var_p, var_d, Kp, Kd = held.var_p, held.var_d, held.Kp, held.Kd
    else:
        var_p = var_d = None
        if gp is not None and gains.variable:
            var_p = var_p_diag(gp, q)
            var_d = var_d_diag(gp, qd, q)
        Kp = gains.Kp(var_p)
        Kd = gains.Kd(var_d)
    u = (est.inertia(q) @ qdd_d + est.coriolis(q, qd) @ qd_d + est.gravity(q)
         + mean - Kd @ e_dot - Kp @ e)
    return u, ControlDiagnostics(Kp, Kd, mean, var_p, var_d)


def ctc_gpr_control(est: ElEstimates, gp: MultiOutputGp | None, gains: GainSchedule,
                    meas: StateTriple, des: DesiredTrajectory, t: float):
    """``u = H^ qdd_d + C^ qd_d + g^ + Mean(p) - K_d(Var_d) e_dot - K_p(Var_p) e``.

    ``meas`` holds the (noisy) measurements; ``e = q - q_d``. Returns the
    torque and a :class:`ControlDiagnostics`. With ``gp=None`` the mean
    compensation is zero and the gains stay at their base values.
    """
    return _control(est, gp, gains, meas, des, t)


def classic_ctc_control(est: ElEstimates, Kp, Kd, meas: StateTriple,
                        des: DesiredTrajectory, t: float) -> np.ndarray:
    gains = GainSchedule.build("classic_static", meas.n, Kp, Kd)
    return _control(est, None, gains, meas, des, t)[0]


@dataclass
class Controller:
    """Bundles estimates, GP and gains into ``u, diag = ctrl(t, meas)``.

    Passing ``held=diag`` from an earlier call reuses that call's gains
    (and variances) instead of re-evaluating the schedule; the simulator
    does this within an integration step.
    """

    est: ElEstimates
    gains: GainSchedule
    des: DesiredTrajectory
    gp: MultiOutputGp | None = None

    def __post_init__(self):
        if self.gains.uses_gp and self.gp is None and self.gains.variable:
            raise ValueError("gpr_variable needs a trained GP")

    def __call__(self, t: float, meas: StateTriple, held: ControlDiagnostics | None = None):
        return _control(self.est, self.gp if self.gains.uses_gp else None, self.gains, meas,
                        self.des, t, held)
