"""Stability-analysis quantities for the GP-compensated computed-torque loop.

Covers the probabilistic model-error bound (information gain, beta, the
worst-case scaled standard deviation over a region), the Lyapunov function,
the admissible range of the cross-term weight ``eps`` and the ultimate-bound
radius, plus a Schur-complement certificate for the drift matrix.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from numpy.polynomial.legendre import leggauss

from .errors import ConditioningError, InfeasibleError
from .gp_core import Hyperparameters, MultiOutputGp, kernel_matrix

log = logging.getLogger(__name__)


@dataclass
class Region:
    """Axis-aligned box with a per-dimension grid resolution.

    A dimension with ``lower == upper`` must have resolution 1 (a slice).
    """

    lower: np.ndarray
    upper: np.ndarray
    resolution: np.ndarray

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        res = np.atleast_1d(np.asarray(self.resolution, dtype=int))
        self.resolution = np.broadcast_to(res, self.lower.shape).copy()
        if self.lower.shape != self.upper.shape:
            raise ValueError("lower and upper bounds differ in length")
        for i, (lo, hi, r) in enumerate(zip(self.lower, self.upper, self.resolution)):
            if r == 1 and lo == hi:
                continue
            if not lo < hi or r < 2:
                raise ValueError(f"dimension {i}: need lower < upper and resolution >= 2 "
                                 f"(or a slice lower == upper with resolution 1)")

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def size(self) -> int:
        return int(np.prod(self.resolution))

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, r) for lo, hi, r in zip(self.lower, self.upper, self.resolution)]

    def grid(self) -> np.ndarray:
        """All grid points as columns, last dimension varying fastest."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh])

    def sample(self, k: int, rng: np.random.Generator) -> np.ndarray:
        return self.lower[:, None] + (self.upper - self.lower)[:, None] * rng.random((self.dim, k))

    def contains(self, points: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all((points >= self.lower[:, None] - tol) & (points <= self.upper[:, None] + tol), axis=0)

    def refined(self, factor: int = 2) -> "Region":
        res = np.where(self.resolution > 1, (self.resolution - 1) * factor + 1, 1)
        return Region(self.lower, self.upper, res)


# ---------------------------------------------------------- information gain

def information_gain(hyper: Hyperparameters, candidates: np.ndarray, noise_std: float,
                     budget: int) -> float:
    """Greedy ``max 1/2 log|I + K_S / noise^2|`` over ``budget``-point subsets.

    Each step adds the candidate with the largest posterior variance given
    the points chosen so far (ties go to the lowest index), which maximizes
    the marginal log-det gain.
    """
    X = np.atleast_2d(np.asarray(candidates, dtype=float))
    C = X.shape[1]
    if C == 0:
        raise ValueError("no candidate points")
    if not 1 <= budget <= C:
        raise ValueError(f"budget must be in [1, {C}], got {budget}")
    s2 = noise_std**2
    var = np.full(C, hyper.signal_std**2)
    L = np.zeros((C, budget))
    chosen = np.zeros(C, dtype=bool)
    gain = 0.0
    for k in range(budget):
        score = np.where(chosen, -np.inf, var)
        j = int(np.argmax(score))
        gain += 0.5 * math.log1p(max(var[j], 0.0) / s2)
        chosen[j] = True
        col = kernel_matrix(X, X[:, j:j + 1], hyper)[:, 0] - L[:, :k] @ L[j, :k]
        col /= math.sqrt(var[j] + s2)
        L[:, k] = col
        var = var - col**2
    return gain


def exact_information_gain(hyper: Hyperparameters, candidates: np.ndarray, noise_std: float,
                           budget: int) -> float:
    """Maximum over all subsets by enumeration; for small candidate sets only."""
    X = np.atleast_2d(np.asarray(candidates, dtype=float))
    C = X.shape[1]
    if C > 20:
        raise ValueError("exhaustive search is limited to 20 candidates")
    K = kernel_matrix(X, X, hyper) / noise_std**2
    best = -np.inf
    for S in itertools.combinations(range(C), budget):
        idx = np.array(S)
        _, logdet = np.linalg.slogdet(np.eye(budget) + K[np.ix_(idx, idx)])
        best = max(best, 0.5 * logdet)
    return float(best)


def beta(rkhs_norm: float, gamma: float, m: int, delta: float, n: int) -> float:
    """``sqrt(2 |f|_k^2 + 300 gamma ln^3((m+1) / (1 - delta^(1/n))))``."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if m < 1 or gamma < 0 or rkhs_norm < 0:
        raise ValueError("need m >= 1, gamma >= 0 and a nonnegative RKHS norm")
    log_term = math.log((m + 1) / (1.0 - delta ** (1.0 / n)))
    return math.sqrt(2.0 * rkhs_norm**2 + 300.0 * gamma * log_term**3)


def rkhs_norm_surrogates(gp: MultiOutputGp) -> np.ndarray:
    """RKHS norms of the posterior means, used in place of the unknown true norms."""
    return np.array([o.rkhs_norm_of_mean() for o in gp.outputs])


def information_gains(gp: MultiOutputGp, candidates: np.ndarray) -> np.ndarray:
    """Per-output greedy information gain with budget ``m + 1``."""
    budget = min(gp.num_data + 1, candidates.shape[1])
    return np.array([information_gain(o.hyper, candidates, o.hyper.noise_std, budget)
                     for o in gp.outputs])


def scaled_std(gp: MultiOutputGp, beta_vec, points: np.ndarray, batch: int = 4096) -> np.ndarray:
    """``|beta^T Var^(1/2)(p)|`` at each column of ``points``."""
    b = np.asarray(beta_vec, dtype=float)
    out = np.empty(points.shape[1])
    for s in range(0, points.shape[1], batch):
        var = gp.variance_batch(points[:, s:s + batch])
        out[s:s + batch] = np.sqrt((b[:, None] ** 2 * var).sum(0))
    return out


def model_error_sup(gp: MultiOutputGp, beta_vec, region: Region, safety: float = 1.05,
                    batch: int = 4096) -> float:
    """Grid maximum of ``|beta^T Var^(1/2)(p)|`` over the region, times ``safety``."""
    if region.dim != gp.input_dim:
        raise ValueError(f"region has {region.dim} dims, GP inputs have {gp.input_dim}")
    b = np.asarray(beta_vec, dtype=float)
    if not np.any(b):
        return 0.0
    best = 0.0
    pts = region.grid()
    for s in range(0, pts.shape[1], batch):
        best = max(best, float(scaled_std(gp, b, pts[:, s:s + batch], batch).max()))
    return safety * best


def empirical_bound_coverage(gp: MultiOutputGp, true_residual: Callable[[np.ndarray], np.ndarray],
                             beta_vec, points: np.ndarray) -> float:
    """Fraction of ``points`` where ``|Mean - tau~| <= |beta^T Var^(1/2)|``."""
    points = np.atleast_2d(points)
    mean = gp.mean_batch(points)
    truth = np.stack([np.asarray(true_residual(points[:, j])) for j in range(points.shape[1])], 1)
    err = np.linalg.norm(mean - truth, axis=0)
    bound = scaled_std(gp, beta_vec, points)
    return float(np.mean(err <= bound))


# ------------------------------------------------------- Lyapunov analysis

@dataclass
class BoundParams:
    h1: float
    h2: float
    k_C: float
    k_p1: float
    k_p2: float
    k_d1: float
    k_d2: float
    qd_bar: float
    delta: float = 0.9
    eps: float = float("nan")
    eps2: float = 1.0
    Delta_bar: float = 0.0
    rkhs_norms: np.ndarray = field(default_factory=lambda: np.zeros(0))
    V0: float | Callable[[float], float] = 0.0

    @property
    def rho(self) -> float:
        return (1 + self.eps2) * (self.k_C * self.qd_bar + self.k_d2) / (2 * self.k_p1)

    def v0_at(self, eps: float) -> float:
        return float(self.V0(eps)) if callable(self.V0) else float(self.V0)


def _eps_third_term(p: BoundParams, eps: float) -> float:
    denom = 2 * p.h2 + 2 * p.k_p1 * p.rho**2 / (1 + p.eps2)
    v0 = p.v0_at(eps)
    if p.k_C > 0 and v0 > 0:
        slack = p.k_p1 - eps * p.h2
        if slack <= 0:
            return 0.0
        denom += 8.0 / 3.0 * p.k_C * math.sqrt(2 * v0 / slack)
    return 2 * p.k_d1 / denom


def epsilon_range(params: BoundParams, tol: float = 1e-15) -> tuple[float, float, str]:
    """Open interval ``(0, eps_max)`` of admissible cross-term weights.

    ``eps_max = min{k_p1/h2, h1/h2, T(eps)}`` where the third term ``T``
    depends on ``eps`` through ``sqrt(2 V0 / (k_p1 - eps h2))``; its fixed
    point is found by bisection. Returns ``(0, eps_max, binding_term)``.
    """
    p = params
    for name in ("h1", "h2", "k_p1", "k_d1"):
        if not getattr(p, name) > 0:
            raise InfeasibleError(f"{name} must be positive for a nonempty eps range", name)
    if not (p.eps2 > 0 and p.k_C >= 0 and p.k_d2 > 0 and p.qd_bar >= 0):
        raise InfeasibleError("eps2, k_d2 must be positive and k_C, qd_bar nonnegative", "constants")
    if not math.isfinite(p.k_C):
        raise InfeasibleError("k_C is unbounded; the estimated Coriolis term has no linear bound", "k_C")
    terms = {"k_p1/h2": p.k_p1 / p.h2, "h1/h2": p.h1 / p.h2}
    upper_name = min(terms, key=terms.get)
    upper = terms[upper_name]

    def g(e):
        return e - _eps_third_term(p, e)

    if g(upper) <= 0:
        return 0.0, upper, upper_name
    lo, hi = 0.0, upper
    while hi - lo > tol * max(upper, 1e-300):
        mid = 0.5 * (lo + hi)
        if g(mid) < 0:
            lo = mid
        else:
            hi = mid
    eps_max = 0.5 * (lo + hi)
    if eps_max <= 0:
        raise InfeasibleError("eps range is empty (damping term)", "2k_d1/(...)")
    return 0.0, eps_max, "2k_d1/(...)"


def choose_epsilon(params: BoundParams, fraction: float = 0.5) -> BoundParams:
    _, eps_max, _ = epsilon_range(params)
    return replace(params, eps=fraction * eps_max)


def ultimate_bound_radius(params: BoundParams) -> dict:
    """Radius ``r`` of the ultimate bound together with ``xi, varrho, v1, v2``."""
    p = params
    eps = p.eps
    if not eps > 0:
        raise InfeasibleError("eps must be positive", "eps")
    v1 = -eps * p.h2 + p.k_d1 - 0.5 * eps * p.rho * (p.k_C * p.qd_bar + p.k_d2)
    v2 = p.k_p1 * p.eps2 / (1 + p.eps2)
    if v1 <= 0:
        raise InfeasibleError(f"v1 = {v1:.4g} is not positive", "v1")
    if v2 <= 0:
        raise InfeasibleError(f"v2 = {v2:.4g} is not positive", "v2")
    slack_p = p.k_p1 - eps * p.h2
    slack_h = p.h1 - eps * p.h2
    if slack_p <= 0 or slack_h <= 0:
        raise InfeasibleError("eps exceeds min(k_p1, h1)/h2", "k_p1/h2" if slack_p <= 0 else "h1/h2")
    v0 = p.v0_at(eps)
    drift = v1 - 4.0 / 3.0 * eps * p.k_C * math.sqrt(2 * v0 / slack_p)
    xi = (2.0 / 3.0) * min(eps * v2, drift) / max(eps * p.h2 + p.k_p2, (1 + eps) * p.h2)
    if xi <= 0:
        raise InfeasibleError(f"xi = {xi:.4g} is not positive", "xi")
    varrho = p.Delta_bar**2 / v1 + eps * p.Delta_bar**2 / v2
    r = math.sqrt(2 * varrho / (xi * min(slack_p, slack_h)))
    return dict(r=r, xi=xi, varrho=varrho, v1=v1, v2=v2)


def accuracy_for_radius(params: BoundParams, target_r: float) -> float:
    """Largest model-error bound that still yields radius ``target_r`` (``r`` is linear in it)."""
    unit = ultimate_bound_radius(replace(params, Delta_bar=1.0))["r"]
    return target_r / unit


def gains_for_radius(params: BoundParams, target_r: float, kd1_values, eps_fraction: float = 0.5):
    """Smallest ``k_d1`` in ``kd1_values`` reaching ``r <= target_r``.

    The spread ``k_d2 - k_d1`` is kept; ``eps`` is re-chosen per candidate.
    Returns ``(k_d1, r)`` or ``(None, None)``.
    """
    spread = params.k_d2 - params.k_d1
    for kd1 in sorted(kd1_values):
        trial = replace(params, k_d1=float(kd1), k_d2=float(kd1) + spread)
        try:
            trial = choose_epsilon(trial, eps_fraction)
            r = ultimate_bound_radius(trial)["r"]
        except InfeasibleError:
            continue
        if r <= target_r:
            return float(kd1), r
    return None, None


_GL_NODES, _GL_WEIGHTS = leggauss(10)


def adaptive_gauss_legendre(f: Callable[[float], float], a: float, b: float,
                            tol: float = 1e-9, depth: int = 30) -> float:
    """Adaptive 10-point Gauss-Legendre quadrature by interval bisection."""
    def rule(lo, hi):
        half = 0.5 * (hi - lo)
        mid = 0.5 * (hi + lo)
        return half * sum(w * f(mid + half * x) for x, w in zip(_GL_NODES, _GL_WEIGHTS))

    def recurse(lo, hi, whole, tol_, d):
        mid = 0.5 * (lo + hi)
        left, right = rule(lo, mid), rule(mid, hi)
        if d <= 0 or abs(left + right - whole) <= tol_:
            return left + right
        return recurse(lo, mid, left, tol_ / 2, d - 1) + recurse(mid, hi, right, tol_ / 2, d - 1)

    return recurse(a, b, rule(a, b), tol, depth)


def kp_energy(e, q_d, gains, gp: MultiOutputGp | None, tol: float = 1e-9) -> float:
    """``int_0^e z^T K_p(Var_p(z + q_d)) dz`` along the straight path ``z = s e``."""
    from .controller import var_p_diag

    e = np.atleast_1d(np.asarray(e, dtype=float))
    q_d = np.atleast_1d(np.asarray(q_d, dtype=float))
    if not np.any(e):
        return 0.0
    variable = gp is not None and gains.variable

    def integrand(s):
        z = s * e
        Kp = gains.Kp(var_p_diag(gp, z + q_d)) if variable else gains.Kp()
        return float(z @ Kp @ e)

    return adaptive_gauss_legendre(integrand, 0.0, 1.0, tol)


def lyapunov_value(e, e_dot, q, est, gains, gp: MultiOutputGp | None, eps: float,
                   tol: float = 1e-9) -> float:
    """``1/2 e_dot^T H^ e_dot + int_0^e z^T K_p dz + eps e^T H^ e_dot``."""
    e = np.atleast_1d(np.asarray(e, dtype=float))
    e_dot = np.atleast_1d(np.asarray(e_dot, dtype=float))
    q = np.atleast_1d(np.asarray(q, dtype=float))
    H = est.inertia(q)
    return float(0.5 * e_dot @ H @ e_dot + kp_energy(e, q - e, gains, gp, tol) + eps * e @ H @ e_dot)


def drift_matrix(Kp, Kd, C_hat, H_hat, eps: float) -> np.ndarray:
    """Quadratic-form matrix ``M`` of the Lyapunov drift in ``[e_dot, e]``."""
    M11 = -Kd + eps * H_hat
    M12 = 0.5 * eps * (-Kd.T + C_hat)
    M21 = 0.5 * eps * (-Kd + C_hat.T)
    M22 = -eps * Kp
    return np.block([[M11, M12], [M21, M22]])


def schur_definiteness_check(Kp, Kd, C_hat, H_hat, eps: float) -> dict:
    """Negative definiteness of ``M`` via ``M11`` and its Schur complement."""
    Kp, Kd, C_hat, H_hat = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (Kp, Kd, C_hat, H_hat))
    B = Kd - eps * H_hat
    if np.linalg.cond(B) > 1e12:
        raise ConditioningError("K_d - eps H^ is singular")
    M11 = -B
    S = -eps * Kp + 0.25 * eps**2 * (Kd - C_hat.T) @ np.linalg.solve(B, Kd.T - C_hat)
    m11_max = np.linalg.eigvalsh(0.5 * (M11 + M11.T))[-1]
    s_max = np.linalg.eigvalsh(0.5 * (S + S.T))[-1]
    M = drift_matrix(Kp, Kd, C_hat, H_hat, eps)
    min_eig = float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])
    max_eig = float(np.linalg.eigvalsh(0.5 * (M + M.T))[-1])
    return dict(negative_definite=bool(m11_max < 0 and s_max < 0), min_eig_M=min_eig,
                max_eig_M=max_eig, max_eig_M11=float(m11_max), max_eig_S=float(s_max))
