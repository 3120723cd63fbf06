"""Closed-loop simulation, training-data generation, metrics and the 1-DOF study."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import qmc

from . import gp_core
from .bounds import Region
from .controller import Controller, DesiredTrajectory, GainSchedule
from .el_dynamics import (ElEstimates, ElModel, StateTriple, forward_dynamics,
                          one_dof_estimates, one_dof_model, stack_p)
from .errors import DynamicsSolveError

log = logging.getLogger(__name__)


@dataclass
class Trajectory:
    times: np.ndarray
    q: np.ndarray
    q_dot: np.ndarray
    q_ddot: np.ndarray
    q_d: np.ndarray
    qd_d: np.ndarray
    qdd_d: np.ndarray
    e: np.ndarray
    e_dot: np.ndarray
    u: np.ndarray
    Kp_norm: np.ndarray
    Kd_norm: np.ndarray
    var_trace: np.ndarray
    noise: np.ndarray
    noise_seed: int
    Kp_diag: np.ndarray | None = None
    Kd_diag: np.ndarray | None = None

    def __len__(self):
        return self.times.size

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0

    @property
    def n(self) -> int:
        return self.q.shape[1]


@dataclass
class TrainingSet:
    inputs: np.ndarray   # (3n, m)
    targets: np.ndarray  # (m, n)
    noise_std: np.ndarray
    grid_spec: Region | None = None

    def __post_init__(self):
        if self.inputs.shape[1] != self.targets.shape[0]:
            raise ValueError("inputs and targets disagree on sample count")

    @property
    def m(self) -> int:
        return self.inputs.shape[1]


@dataclass
class Metrics:
    l2_error: float
    max_e: float
    max_edot: float
    max_u: float
    inv_snr: float
    max_combined_error: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _channel_std(noise_std, n: int) -> np.ndarray:
    """Expand a scalar, a per-channel ``(qdd, qd, q)`` triple or a full vector to ``3n``."""
    s = np.atleast_1d(np.asarray(noise_std, dtype=float))
    if s.size == 1:
        return np.full(3 * n, s[0])
    if s.size == 3 and n != 1:
        return np.repeat(s, n)
    if s.size == 3 * n:
        return s.copy()
    raise ValueError(f"noise_std must have 1, 3 or {3 * n} entries, got {s.size}")


def rk4_step(f, t: float, x: np.ndarray, dt: float, k1: np.ndarray | None = None) -> np.ndarray:
    if k1 is None:
        k1 = f(t, x)
    k2 = f(t + dt / 2, x + dt / 2 * k1)
    k3 = f(t + dt / 2, x + dt / 2 * k2)
    k4 = f(t + dt, x + dt * k3)
    return x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _sym_norm(K: np.ndarray) -> float:
    """Spectral norm of a symmetric matrix."""
    if K.shape[0] == 1:
        return abs(float(K[0, 0]))
    return float(np.abs(np.linalg.eigvalsh(K)).max())


class ZeroController:
    """Applies no torque; for open-loop runs."""

    def __init__(self, n: int):
        self.n = n

    def __call__(self, t, meas):
        return np.zeros(self.n), None


def simulate(model: ElModel, controller, des: DesiredTrajectory | None, q0, qd0,
             horizon: float, dt: float = 1e-3, noise_std=0.0, seed: int = 0,
             noise: np.ndarray | None = None) -> Trajectory:
    """Fixed-step RK4 closed loop with noisy measurements.

    The measurement noise for step ``k`` is drawn once and held over the four
    RK stages; the control law is evaluated at every stage while the
    scheduled gains are computed once per step, at the step's measurement
    (for controllers accepting ``held=``). The measured acceleration is the
    true acceleration of the previous step plus noise. ``noise`` may supply
    a pre-drawn ``(steps+1, 3n)`` noise record.
    """
    if dt <= 0 or horizon < dt:
        raise ValueError("need dt > 0 and horizon >= dt")
    n = model.n
    steps = int(round(horizon / dt))
    std = _channel_std(noise_std, n)
    if noise is None:
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal((steps + 1, 3 * n)) * std
    elif noise.shape != (steps + 1, 3 * n):
        raise ValueError(f"noise record must have shape {(steps + 1, 3 * n)}")

    q = np.atleast_1d(np.asarray(q0, dtype=float)).copy()
    qd = np.atleast_1d(np.asarray(qd0, dtype=float)).copy()
    if des is None:
        zero = np.zeros(n)
        des = DesiredTrajectory(lambda t: zero, lambda t: zero, lambda t: zero)

    rec = {k: np.zeros((steps + 1, n)) for k in
           ("q", "q_dot", "q_ddot", "q_d", "qd_d", "qdd_d", "u", "Kp_diag", "Kd_diag")}
    kp_norm = np.zeros(steps + 1)
    kd_norm = np.zeros(steps + 1)
    var_tr = np.zeros(steps + 1)
    times = dt * np.arange(steps + 1)
    gp = getattr(controller, "gp", None)
    hold_gains = isinstance(controller, Controller)

    # acceleration "before" the first step: response to the control computed
    # with the desired acceleration standing in for the measurement
    eta = noise[0]
    u_pre, _ = controller(0.0, StateTriple(des.qdd_d(0.0), qd + eta[n:2 * n], q + eta[2 * n:]))
    qdd_prev = forward_dynamics(model, q, qd, u_pre)

    for k in range(steps + 1):
        t = times[k]
        eta = noise[k]
        meas_qdd = qdd_prev + eta[:n]

        def control_at(ts, qs, qds, held=None):
            meas = StateTriple(meas_qdd, qds + eta[n:2 * n], qs + eta[2 * n:])
            if held is None:
                return controller(ts, meas)
            return controller(ts, meas, held=held)

        u0, diag = control_at(t, q, qd)
        held = diag if hold_gains and diag is not None else None
        try:
            qdd0 = forward_dynamics(model, q, qd, u0)
        except DynamicsSolveError as exc:
            exc.step = k
            raise
        rec["q"][k], rec["q_dot"][k], rec["q_ddot"][k], rec["u"][k] = q, qd, qdd0, u0
        rec["q_d"][k], rec["qd_d"][k], rec["qdd_d"][k] = (np.atleast_1d(des.q_d(t)),
                                                          np.atleast_1d(des.qd_d(t)),
                                                          np.atleast_1d(des.qdd_d(t)))
        if diag is not None:
            rec["Kp_diag"][k] = np.diag(diag.Kp)
            rec["Kd_diag"][k] = np.diag(diag.Kd)
            kp_norm[k] = _sym_norm(diag.Kp)
            kd_norm[k] = _sym_norm(diag.Kd)
        if gp is not None and controller.gains.uses_gp:
            var_tr[k] = gp.variance_point(stack_p(meas_qdd, qd + eta[n:2 * n], q + eta[2 * n:])).sum()
        if k == steps:
            break

        def f(ts, x):
            qs, qds = x[:n], x[n:]
            u, _ = control_at(ts, qs, qds, held)
            return np.concatenate([qds, forward_dynamics(model, qs, qds, u)])

        try:
            x = rk4_step(f, t, np.concatenate([q, qd]), dt, k1=np.concatenate([qd, qdd0]))
        except DynamicsSolveError as exc:
            exc.step = k
            raise
        q, qd = x[:n], x[n:]
        qdd_prev = qdd0

    return Trajectory(times, rec["q"], rec["q_dot"], rec["q_ddot"], rec["q_d"], rec["qd_d"],
                      rec["qdd_d"], rec["q"] - rec["q_d"], rec["q_dot"] - rec["qd_d"], rec["u"],
                      kp_norm, kd_norm, var_tr, noise, int(seed), rec["Kp_diag"], rec["Kd_diag"])


def compute_metrics(traj: Trajectory, noise: np.ndarray | None = None) -> Metrics:
    """Tracking metrics of a run.

    ``noise`` is the per-step noise record entering the 1/SNR ratio against
    the state ``[q, qd]``; by default the measurement noise on ``(qd, q)``.
    """
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    n = traj.n
    dt = traj.dt
    e2 = (traj.e**2).sum(1)
    ed2 = (traj.e_dot**2).sum(1)
    if noise is None:
        noise = traj.noise[:, n:]
    state2 = (traj.q**2).sum() + (traj.q_dot**2).sum()
    inv_snr = float((np.asarray(noise)**2).sum() / state2) if state2 > 0 else float("inf")
    return Metrics(
        # left Riemann sum over the run's intervals
        l2_error=float(np.sqrt((e2 + ed2)[:-1].sum() * dt)) if len(traj) > 1 else 0.0,
        max_e=float(np.sqrt(e2.max())),
        max_edot=float(np.sqrt(ed2.max())),
        max_u=float(np.linalg.norm(traj.u, axis=1).max()),
        inv_snr=inv_snr,
        max_combined_error=float(np.sqrt((e2 + ed2).max())),
    )


# ------------------------------------------------------------- training data

def region_points(region: Region, mode: str = "grid", m: int | None = None,
                  seed: int = 0) -> np.ndarray:
    """Points ``(d, k)`` of a full grid, or ``m`` scrambled Halton points."""
    if mode == "grid":
        return region.grid()
    if mode == "lattice":
        if m is None:
            raise ValueError("lattice mode needs the point count m")
        lo, hi = region.lower, region.upper
        free = hi > lo
        pts = np.repeat(lo[:, None], m, axis=1)
        if free.any():
            sample = qmc.Halton(d=int(free.sum()), scramble=True, seed=seed).random(m)
            pts[free] = qmc.scale(sample, lo[free], hi[free]).T
        return pts
    raise ValueError(f"unknown point mode {mode!r}")


def generate_training_grid(true_model: ElModel, est: ElEstimates, grid_spec: Region,
                           noise_std, seed: int = 0, mode: str = "grid",
                           m: int | None = None) -> TrainingSet:
    """Residual-torque samples with noisy state measurements.

    At each true point ``p`` the applied torque ``H qdd + C qd + g - f_u`` is
    exact; the estimate is evaluated at the noisy measurement, which is also
    the stored input.
    """
    n = true_model.n
    if grid_spec.dim != 3 * n:
        raise ValueError(f"grid must span {3 * n} dimensions")
    P = region_points(grid_spec, mode, m, seed)
    if mode == "grid" and m is not None and P.shape[1] != m:
        raise ValueError(f"grid has {P.shape[1]} points, expected {m}")
    std = _channel_std(noise_std, n)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(P.shape[::-1]).T * std[:, None]
    P_meas = P + noise
    targets = np.empty((P.shape[1], n))
    for j in range(P.shape[1]):
        p, pm = P[:, j], P_meas[:, j]
        u_true = true_model.inverse_dynamics(p[:n], p[n:2 * n], p[2 * n:])
        targets[j] = u_true - est.torque(pm[:n], pm[n:2 * n], pm[2 * n:])
    return TrainingSet(P_meas, targets, std, grid_spec)


def default_hyperparameters(train: TrainingSet) -> list[gp_core.Hyperparameters]:
    """Data-scaled starting point for the likelihood optimization."""
    X, Y = train.inputs, train.targets
    spread = X.max(1) - X.min(1)
    ell = np.where(spread > 1e-9, spread / 2, 1.0)
    out = []
    for i in range(Y.shape[1]):
        sf = max(float(Y[:, i].std()), 1e-3)
        out.append(gp_core.Hyperparameters(sf, tuple(ell), 0.1 * sf))
    return out


def train_gp(train: TrainingSet, opts: gp_core.OptimizeOptions | None = None,
             init=None) -> gp_core.MultiOutputGp:
    init = init or default_hyperparameters(train)
    hyper = gp_core.optimize_hyperparameters(train.inputs, train.targets, init, opts)
    return gp_core.fit(train.inputs, train.targets, hyper)


# ------------------------------------------------------------ 1-DOF study

@dataclass
class OneDofStudyConfig:
    n_systems: int = 30
    seed: int = 0
    c_low: float = 0.0
    c_high: float = 2 * np.pi
    horizon: float = 2 * np.pi
    dt: float = 1e-3
    noise_std: float = 0.04
    q0: float = 0.0
    qd0: float = 1.0
    grid: Region = field(default_factory=lambda: Region([0, -1, -1], [0, 1, 1], [1, 21, 21]))
    ctc_Kp: float = 100.0
    ctc_Kd: float = 100.0
    gpr_Kp_base: float = 10.0
    gpr_Kd_base: float = 10.0
    gpr_Kp_scale: float = 100.0
    gpr_Kd_scale: float = 100.0
    gpr_kind: str = "gpr_variable"
    ctc_kind: str = "classic_static"
    optimize: gp_core.OptimizeOptions = field(default_factory=gp_core.OptimizeOptions)
    threads: int = 1


FIG3_QUANTITIES = ("Kp_min", "Kp_max", "Kd_min", "Kd_max", "max_tracking_error", "inv_snr",
                   "max_control")


def _onedof_system(args) -> dict:
    cfg, c, seeds = args
    model = one_dof_model(c)
    est = one_dof_estimates()
    des = DesiredTrajectory.sinusoid([1.0], [0.0])
    train = generate_training_grid(model, est, cfg.grid, cfg.noise_std, seed=int(seeds[0]))
    opts = replace(cfg.optimize, seed=int(seeds[1]))
    gp = train_gp(train, opts) if "gpr" in (cfg.gpr_kind + cfg.ctc_kind) else None

    steps = int(round(cfg.horizon / cfg.dt))
    noise = np.random.default_rng(int(seeds[2])).standard_normal((steps + 1, 3)) * cfg.noise_std
    clean = np.zeros_like(noise)

    def run(kind, Kp, Kd, Kp_s=0.0, Kd_s=0.0):
        gains = GainSchedule.build(kind, 1, Kp, Kd, Kp_s, Kd_s)
        ctrl = Controller(est, gains, des, gp if gains.uses_gp else None)
        noisy = simulate(model, ctrl, des, [cfg.q0], [cfg.qd0], cfg.horizon, cfg.dt, noise=noise)
        quiet = simulate(model, ctrl, des, [cfg.q0], [cfg.qd0], cfg.horizon, cfg.dt, noise=clean)
        state_noise = np.hstack([noisy.q - quiet.q, noisy.q_dot - quiet.q_dot])
        return noisy, compute_metrics(noisy, state_noise)

    ctc_traj, ctc = run(cfg.ctc_kind, cfg.ctc_Kp, cfg.ctc_Kd)
    gpr_traj, gpr = run(cfg.gpr_kind, cfg.gpr_Kp_base, cfg.gpr_Kd_base,
                        cfg.gpr_Kp_scale, cfg.gpr_Kd_scale)
    return dict(
        c=c,
        Kp_min=gpr_traj.Kp_norm.min() / ctc_traj.Kp_norm.max(),
        Kp_max=gpr_traj.Kp_norm.max() / ctc_traj.Kp_norm.max(),
        Kd_min=gpr_traj.Kd_norm.min() / ctc_traj.Kd_norm.max(),
        Kd_max=gpr_traj.Kd_norm.max() / ctc_traj.Kd_norm.max(),
        max_tracking_error=gpr.max_combined_error / ctc.max_combined_error,
        inv_snr=gpr.inv_snr / ctc.inv_snr,
        max_control=gpr.max_u / ctc.max_u,
        ctc_max_error=ctc.max_combined_error,
        gpr_max_error=gpr.max_combined_error,
    )


def quartiles(values) -> dict:
    v = np.asarray(values, dtype=float)
    return dict(zip(("min", "q1", "median", "q3", "max"),
                    np.percentile(v, [0, 25, 50, 75, 100]).tolist()))


def study_threads(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get("GPCTC_THREADS", default)))
    except ValueError:
        return default


def randomized_onedof_study(cfg: OneDofStudyConfig | None = None) -> dict:
    """Compare CTC and CTC-GPR on randomly drawn 1-DOF load torques.

    Returns per-system ratio records (CTC-GPR / CTC), a quartile summary per
    quantity, and the number of failed systems.
    """
    cfg = cfg or OneDofStudyConfig()
    master = np.random.SeedSequence(cfg.seed)
    cs = np.random.default_rng(master.spawn(1)[0]).uniform(cfg.c_low, cfg.c_high, cfg.n_systems)
    children = master.spawn(cfg.n_systems)
    jobs = [(cfg, float(c), ch.generate_state(3)) for c, ch in zip(cs, children)]
    threads = min(cfg.threads, study_threads(cfg.threads))
    records, failures = [], []

    def collect(results):
        for c, res in results:
            if isinstance(res, Exception):
                log.warning("system c=%.4f failed: %s", c, res)
                failures.append(dict(c=c, error=str(res)))
            else:
                records.append(res)
                log.info("system %d/%d (c=%.4f): error ratio %.3f", len(records) + len(failures),
                         len(jobs), c, res["max_tracking_error"])

    if threads > 1:
        with ProcessPoolExecutor(threads) as pool:
            futs = [(job[1], pool.submit(_onedof_system, job)) for job in jobs]
            collect((c, _safe_result(f)) for c, f in futs)
    else:
        collect((job[1], _safe_call(job)) for job in jobs)

    summary = {k: quartiles([r[k] for r in records]) for k in FIG3_QUANTITIES} if records else {}
    return dict(records=records, summary=summary, failures=failures)


def _safe_call(job):
    try:
        return _onedof_system(job)
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        return exc


def _safe_result(fut):
    try:
        return fut.result()
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        return exc
