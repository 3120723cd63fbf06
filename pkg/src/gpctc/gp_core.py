"""Multi-output GP regression with squared-exponential ARD kernels.

Inputs are stored column-wise: ``X`` has shape ``(d, m)`` (one column per
training sample) and targets ``Y`` have shape ``(m, n)``. Every output gets
its own independent GP sharing the same inputs.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import blas, cho_solve, solve_triangular
from scipy.optimize import minimize

from .errors import ConditioningError

log = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_STOP = 1e-4


@dataclass(frozen=True)
class Hyperparameters:
    signal_std: float
    lengthscales: tuple[float, ...]
    noise_std: float

    def __post_init__(self):
        object.__setattr__(self, "signal_std", float(self.signal_std))
        object.__setattr__(self, "noise_std", float(self.noise_std))
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        object.__setattr__(self, "lengthscales", ls)
        if self.signal_std <= 0 or self.noise_std <= 0 or min(ls, default=0.0) <= 0:
            raise ValueError(f"hyperparameters must be strictly positive: {self}")

    @property
    def dim(self) -> int:
        return len(self.lengthscales)

    def to_log(self) -> np.ndarray:
        """Pack as ``[log sf, log l_1..l_d, log sn]``."""
        return np.log(np.r_[self.signal_std, self.lengthscales, self.noise_std])

    @classmethod
    def from_log(cls, theta) -> "Hyperparameters":
        theta = np.exp(np.asarray(theta, dtype=float))
        return cls(theta[0], tuple(theta[1:-1]), theta[-1])

    def subset(self, indices: Sequence[int]) -> "Hyperparameters":
        """Hyperparameters of the kernel restricted to ``indices``."""
        ls = np.asarray(self.lengthscales)[list(indices)]
        return Hyperparameters(self.signal_std, tuple(ls), self.noise_std)


@dataclass(frozen=True)
class SubsetSpec:
    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        if not idx:
            raise ValueError("subset must retain at least one input dimension")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"subset indices must be strictly increasing: {idx}")

    def check(self, dim: int):
        if self.indices[0] < 0 or self.indices[-1] >= dim:
            raise ValueError(f"subset {self.indices} out of range for input dim {dim}")


def _sqdist_scaled(A: np.ndarray, B: np.ndarray, lengthscales) -> np.ndarray:
    """Squared scaled distances between columns of A (d, a) and B (d, b)."""
    ell = np.asarray(lengthscales, dtype=float)[:, None]
    A = A / ell
    B = B / ell
    d2 = (A * A).sum(0)[:, None] + (B * B).sum(0)[None, :] - 2.0 * A.T @ B
    return np.maximum(d2, 0.0)


def kernel_matrix(A: np.ndarray, B: np.ndarray, hyper: Hyperparameters) -> np.ndarray:
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    if A.shape[0] != hyper.dim or B.shape[0] != hyper.dim:
        raise ValueError(
            f"input dimension mismatch: {A.shape[0]}, {B.shape[0]} vs {hyper.dim} lengthscales")
    return hyper.signal_std**2 * np.exp(-0.5 * _sqdist_scaled(A, B, hyper.lengthscales))


def kernel_eval(x, x_prime, hyper: Hyperparameters) -> float:
    """Squared-exponential ARD covariance between two points."""
    x = np.asarray(x, dtype=float).ravel()
    x_prime = np.asarray(x_prime, dtype=float).ravel()
    if x.size != hyper.dim or x_prime.size != hyper.dim:
        raise ValueError(f"expected {hyper.dim}-vectors, got {x.size} and {x_prime.size}")
    z = (x - x_prime) / np.asarray(hyper.lengthscales)
    return float(hyper.signal_std**2 * np.exp(-0.5 * z @ z))


def jittered_cholesky(K: np.ndarray, noise_var: float) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``K + noise_var*I + jitter*I``.

    Jitter starts at 1e-10*trace(K)/m and grows tenfold up to 1e-4*trace(K)/m.
    """
    m = K.shape[0]
    scale = max(np.trace(K) / m, np.finfo(float).tiny)
    tried = []
    rel = JITTER_START
    while rel <= JITTER_STOP * (1 + 1e-9):
        jitter = rel * scale
        tried.append(jitter)
        Ks = K + (noise_var + jitter) * np.eye(m)
        try:
            return np.linalg.cholesky(Ks), jitter
        except np.linalg.LinAlgError:
            rel *= 10.0
    raise ConditioningError("Cholesky failed for every jitter level", tuple(tried))


@dataclass
class OutputGpModel:
    """Exact GP posterior for a single output."""

    inputs: np.ndarray
    targets: np.ndarray
    hyper: Hyperparameters
    chol_factor: np.ndarray
    weight_vector: np.ndarray
    jitter: float

    @classmethod
    def fit(cls, X: np.ndarray, y: np.ndarray, hyper: Hyperparameters) -> "OutputGpModel":
        K = kernel_matrix(X, X, hyper)
        L, jitter = jittered_cholesky(K, hyper.noise_std**2)
        alpha = cho_solve((L, True), y)
        return cls(X, y, hyper, L, alpha, jitter)

    def cross(self, xs: np.ndarray) -> np.ndarray:
        return kernel_matrix(self.inputs, xs, self.hyper)

    def mean(self, xs: np.ndarray) -> np.ndarray:
        return self.cross(xs).T @ self.weight_vector

    def variance(self, xs: np.ndarray, Ks: np.ndarray | None = None) -> np.ndarray:
        if Ks is None:
            Ks = self.cross(xs)
        v = solve_triangular(self.chol_factor, Ks, lower=True, check_finite=False)
        return np.maximum(self.hyper.signal_std**2 - (v * v).sum(0), 0.0)

    # single-point fast path used inside the simulation loop

    def _point_cache(self):
        cache = self.__dict__.get("_point_cache_data")
        if cache is None:
            ell = np.asarray(self.hyper.lengthscales, dtype=float)
            cache = (self.inputs / ell[:, None], ell, np.asfortranarray(self.chol_factor))
            self.__dict__["_point_cache_data"] = cache
        return cache

    def cross_point(self, x: np.ndarray) -> np.ndarray:
        Xs, ell, _ = self._point_cache()
        z = Xs - (x / ell)[:, None]
        return self.hyper.signal_std**2 * np.exp(-0.5 * np.einsum("ij,ij->j", z, z))

    def mean_point(self, x: np.ndarray) -> float:
        return float(self.cross_point(x) @ self.weight_vector)

    def variance_point(self, x: np.ndarray) -> float:
        Lf = self._point_cache()[2]
        v = blas.dtrsv(Lf, self.cross_point(x), lower=1)
        return max(self.hyper.signal_std**2 - float(v @ v), 0.0)

    def rkhs_norm_of_mean(self) -> float:
        """RKHS norm of the posterior mean, ``sqrt(a^T K a)``."""
        K = kernel_matrix(self.inputs, self.inputs, self.hyper)
        return float(np.sqrt(max(self.weight_vector @ K @ self.weight_vector, 0.0)))


@dataclass
class MultiOutputGp:
    """``n`` independent GPs on shared inputs.

    Marginal models (kernel restricted to a subset of input dimensions) are
    built lazily and cached per subset; the cache is the only mutable state.
    """

    outputs: list[OutputGpModel]
    marginal_models: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def input_dim(self) -> int:
        return self.outputs[0].inputs.shape[0]

    @property
    def output_dim(self) -> int:
        return len(self.outputs)

    @property
    def num_data(self) -> int:
        return self.outputs[0].inputs.shape[1]

    @property
    def inputs(self) -> np.ndarray:
        return self.outputs[0].inputs

    @property
    def hypers(self) -> list[Hyperparameters]:
        return [o.hyper for o in self.outputs]

    def _points(self, xs, dim: int) -> tuple[np.ndarray, bool]:
        xs = np.asarray(xs, dtype=float)
        single = xs.ndim == 1
        xs = xs.reshape(-1, 1) if single else xs
        if xs.shape[0] != dim:
            raise ValueError(f"expected inputs of dimension {dim}, got {xs.shape[0]}")
        return xs, single

    def mean_batch(self, xs) -> np.ndarray:
        """Posterior means at columns of ``xs``; shape ``(n, k)``."""
        xs, _ = self._points(xs, self.input_dim)
        return np.stack([o.mean(xs) for o in self.outputs])

    def variance_batch(self, xs) -> np.ndarray:
        """Posterior variance diagonals at columns of ``xs``; shape ``(n, k)``."""
        xs, _ = self._points(xs, self.input_dim)
        return np.stack([o.variance(xs) for o in self.outputs])

    def marginal(self, spec: SubsetSpec) -> list[OutputGpModel]:
        spec.check(self.input_dim)
        key = spec.indices
        models = self.marginal_models.get(key)
        if models is None:
            with self._lock:
                models = self.marginal_models.get(key)
                if models is None:
                    if len(key) == self.input_dim:
                        models = self.outputs
                    else:
                        Xs = self.inputs[list(key), :]
                        models = [OutputGpModel.fit(Xs, o.targets, o.hyper.subset(key))
                                  for o in self.outputs]
                    self.marginal_models[key] = models
        return models

    def mean_point(self, x: np.ndarray) -> np.ndarray:
        """Posterior mean at a single point ``x`` of full input dimension."""
        return np.array([o.mean_point(x) for o in self.outputs])

    def variance_point(self, x: np.ndarray) -> np.ndarray:
        """Posterior variance of every output at a single full-dimension point."""
        return np.array([o.variance_point(x) for o in self.outputs])

    def marginal_variance_point(self, spec: SubsetSpec, x: np.ndarray) -> np.ndarray:
        """Per-output marginal variance at a single point of the subset dims."""
        return np.array([o.variance_point(x) for o in self.marginal(spec)])

    def marginal_variance_batch(self, spec: SubsetSpec, xs) -> np.ndarray:
        models = self.marginal(spec)
        xs, _ = self._points(xs, len(spec.indices))
        return np.stack([o.variance(xs) for o in models])


def fit(X, Y, hyper: Sequence[Hyperparameters]) -> MultiOutputGp:
    """Fit one exact GP per column of ``Y`` on shared inputs ``X`` (d, m)."""
    X = np.array(X, dtype=float, copy=True)
    if X.ndim == 1:
        X = X[None, :]
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[1] < 1:
        raise ValueError("need at least one training sample")
    if Y.shape[0] != X.shape[1]:
        raise ValueError(f"{X.shape[1]} inputs but {Y.shape[0]} target rows")
    if len(hyper) != Y.shape[1]:
        raise ValueError(f"{Y.shape[1]} outputs but {len(hyper)} hyperparameter sets")
    X.setflags(write=False)
    outs = []
    for i, h in enumerate(hyper):
        if h.dim != X.shape[0]:
            raise ValueError(f"output {i}: {h.dim} lengthscales for {X.shape[0]}-D inputs")
        outs.append(OutputGpModel.fit(X, Y[:, i].copy(), h))
    return MultiOutputGp(outs)


def predict_mean(model: MultiOutputGp, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("predict_mean expects a single input vector")
    return model.mean_batch(x)[:, 0]


def predict_variance(model: MultiOutputGp, x) -> np.ndarray:
    """Diagonal ``n x n`` posterior variance at ``x``."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("predict_variance expects a single input vector")
    return np.diag(model.variance_batch(x)[:, 0])


def marginal_variance(model: MultiOutputGp, spec: SubsetSpec | Sequence[int], x1) -> np.ndarray:
    """Diagonal variance from kernels restricted to the retained dimensions."""
    if not isinstance(spec, SubsetSpec):
        spec = SubsetSpec(tuple(spec))
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    if x1.size != len(spec.indices):
        raise ValueError(f"expected {len(spec.indices)} coordinates, got {x1.size}")
    return np.diag(model.marginal_variance_batch(spec, x1)[:, 0])


# ---------------------------------------------------------------- likelihood

def _lml_from_log(theta: np.ndarray, X: np.ndarray, y: np.ndarray,
                  tied: bool = False) -> tuple[float, np.ndarray]:
    d = X.shape[0]
    if tied:
        theta = np.r_[theta[0], np.full(d, theta[1]), theta[2]]
    hyper = Hyperparameters.from_log(theta)
    m = X.shape[1]
    ell = np.asarray(hyper.lengthscales)
    K = kernel_matrix(X, X, hyper)
    L, _ = jittered_cholesky(K, hyper.noise_std**2)
    alpha = cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * m * np.log(2 * np.pi)

    Kinv = cho_solve((L, True), np.eye(m))
    W = np.outer(alpha, alpha) - Kinv
    grad = np.empty(d + 2)
    grad[0] = 0.5 * np.sum(W * (2.0 * K))
    for k in range(d):
        dk = (X[k][:, None] - X[k][None, :]) ** 2 / ell[k] ** 2
        grad[1 + k] = 0.5 * np.sum(W * K * dk)
    grad[-1] = 0.5 * np.trace(W) * 2.0 * hyper.noise_std**2
    if tied:
        grad = np.r_[grad[0], grad[1:-1].sum(), grad[-1]]
    return float(lml), grad


def log_marginal_likelihood(X, y, hyper: Hyperparameters) -> tuple[float, np.ndarray]:
    """Log evidence of one output and its gradient w.r.t. log-hyperparameters.

    The gradient is ordered ``[log signal_std, log lengthscale_1.., log noise_std]``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if y.size != X.shape[1]:
        raise ValueError("targets and inputs disagree on sample count")
    if hyper.dim != X.shape[0]:
        raise ValueError("lengthscale count does not match input dimension")
    return _lml_from_log(hyper.to_log(), X, y)


LOG_HYPER_LIMIT = 25.0


@dataclass(frozen=True)
class OptimizeOptions:
    max_iters: int = 200
    tolerance: float = 1e-5
    restarts: int = 0
    seed: int = 0
    tie_lengthscales: bool = False
    method: str = "CG"
    restart_spread: float = 1.0


def _optimize_one(X, y, init: Hyperparameters, opts: OptimizeOptions,
                  rng: np.random.Generator) -> Hyperparameters:
    tied = opts.tie_lengthscales
    if opts.max_iters <= 0:
        return init
    theta0 = init.to_log()
    if tied:
        theta0 = np.r_[theta0[0], np.mean(theta0[1:-1]), theta0[-1]]
        # a tied start must be evaluated as tied, otherwise "never worse" is vs. a different model
        init = Hyperparameters.from_log(np.r_[theta0[0], np.full(X.shape[0], theta0[1]), theta0[2]])

    def unpack(th):
        if tied:
            th = np.r_[th[0], np.full(X.shape[0], th[1]), th[2]]
        return Hyperparameters.from_log(th)

    def objective(th):
        # line searches may probe absurd scales; treat them as infeasible
        if np.abs(th).max() > LOG_HYPER_LIMIT:
            return np.inf, np.zeros_like(th)
        try:
            f, g = _lml_from_log(th, X, y, tied)
        except ConditioningError:
            return np.inf, np.zeros_like(th)
        return -f, -g

    try:
        f0, g0 = objective(theta0)
    except ConditioningError:
        f0, g0 = np.inf, None
    if np.isfinite(f0) and np.linalg.norm(g0) < opts.tolerance:
        return init

    best_f, best_theta = f0, theta0
    starts = [theta0] + [theta0 + opts.restart_spread * rng.standard_normal(theta0.size)
                         for _ in range(opts.restarts)]
    for i, start in enumerate(starts):
        if not np.isfinite(objective(start)[0]):
            log.debug("restart %d: infeasible start", i)
            continue
        res = minimize(objective, start, jac=True, method=opts.method,
                       options={"maxiter": opts.max_iters, "gtol": opts.tolerance})
        if np.isfinite(res.fun) and res.fun < best_f:
            best_f, best_theta = float(res.fun), res.x
    if not np.isfinite(best_f):
        raise ConditioningError("all optimization starts failed", ())
    return init if best_theta is theta0 else unpack(best_theta)


def optimize_hyperparameters(X, Y, init: Sequence[Hyperparameters],
                             opts: OptimizeOptions | None = None) -> list[Hyperparameters]:
    """Maximize the log evidence per output in log-parameter space.

    The result never has lower likelihood than ``init``.
    """
    opts = opts or OptimizeOptions()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if len(init) != Y.shape[1]:
        raise ValueError("one initial hyperparameter set per output is required")
    out = []
    for i, h in enumerate(init):
        rng = np.random.default_rng([opts.seed, i])
        out.append(_optimize_one(X, Y[:, i], h, opts, rng))
    return out
