"""CSV and key-value file formats for training sets, hyperparameters and runs.

Floats are written with ``repr`` so values round-trip exactly and repeated
runs produce byte-identical files.
"""
from __future__ import annotations

import configparser
import csv
from pathlib import Path
from typing import Sequence

import numpy as np

from .gp_core import Hyperparameters


def _fmt(x) -> str:
    return repr(float(x))


def write_training_csv(path, inputs: np.ndarray, targets: np.ndarray) -> None:
    """Rows are samples; columns ``p_1..p_{3n}, tau_1..tau_n``."""
    inputs = np.asarray(inputs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 1:
        targets = targets[:, None]
    if inputs.shape[1] != targets.shape[0]:
        raise ValueError("inputs (d, m) and targets (m, n) disagree on m")
    d, n = inputs.shape[0], targets.shape[1]
    header = [f"p_{i + 1}" for i in range(d)] + [f"tau_{j + 1}" for j in range(n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for j in range(inputs.shape[1]):
            w.writerow([_fmt(v) for v in inputs[:, j]] + [_fmt(v) for v in targets[j]])


def read_training_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`write_training_csv`; returns ``(inputs (d, m), targets (m, n))``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty training file")
    header = rows[0]
    p_cols = [i for i, h in enumerate(header) if h.startswith("p_")]
    t_cols = [i for i, h in enumerate(header) if h.startswith("tau_")]
    if not p_cols or not t_cols or len(p_cols) + len(t_cols) != len(header):
        raise ValueError(f"{path}: header must be p_1..p_d, tau_1..tau_n")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric entry ({exc})") from exc
    if data.size == 0:
        raise ValueError(f"{path}: no samples")
    return data[:, p_cols].T.copy(), data[:, t_cols].copy()


def write_hyperparameters(path, hypers: Sequence[Hyperparameters]) -> None:
    """One ``[output_j]`` block per output with ``signal_std``, ``lengthscale_i``, ``noise_std``."""
    cp = configparser.ConfigParser()
    for j, h in enumerate(hypers):
        block = {"signal_std": _fmt(h.signal_std)}
        block.update({f"lengthscale_{i + 1}": _fmt(v) for i, v in enumerate(h.lengthscales)})
        block["noise_std"] = _fmt(h.noise_std)
        cp[f"output_{j + 1}"] = block
    with open(path, "w") as fh:
        cp.write(fh)


def read_hyperparameters(path) -> list[Hyperparameters]:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    out = []
    names = sorted((s for s in cp.sections() if s.startswith("output_")),
                   key=lambda s: int(s.split("_")[1]))
    for name in names:
        sec = cp[name]
        ell_keys = sorted((k for k in sec if k.startswith("lengthscale_")),
                          key=lambda k: int(k.split("_")[1]))
        out.append(Hyperparameters(sec.getfloat("signal_std"),
                                   tuple(sec.getfloat(k) for k in ell_keys),
                                   sec.getfloat("noise_std")))
    if not out:
        raise ValueError(f"{path}: no [output_j] sections")
    return out


def write_rows(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for r in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in r])


TRAJECTORY_VECTORS = ("q", "q_dot", "q_ddot", "q_d", "qd_d", "qdd_d", "e", "e_dot", "u")


def write_trajectory_csv(path, traj) -> None:
    """One row per step: time, states, errors, torque and gain traces."""
    n = traj.n
    header = ["t"] + [f"{name}_{i + 1}" for name in TRAJECTORY_VECTORS for i in range(n)]
    header += ["Kp_norm", "Kd_norm", "var_trace"]
    table = np.hstack([traj.times[:, None]] + [getattr(traj, name) for name in TRAJECTORY_VECTORS]
                      + [traj.Kp_norm[:, None], traj.Kd_norm[:, None], traj.var_trace[:, None]])
    write_rows(path, header, table)


def write_metrics_csv(path, metrics: dict) -> None:
    """``name,value`` rows for a flat dict of scalars (or ``label -> Metrics`` mapping)."""
    rows = []
    for k, v in metrics.items():
        if hasattr(v, "as_dict"):
            rows += [(f"{k}.{kk}", vv) for kk, vv in v.as_dict().items()]
        else:
            rows.append((k, v))
    write_rows(path, ("name", "value"), rows)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
