"""Experiment configuration files (INI-style sections of ``key = value``).

Every section maps onto a small dataclass; unknown sections or keys and
unparsable values raise :class:`ConfigError` naming the file, section and
line. :func:`dump_config` writes a file that parses back to an equal object.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .controller import KINDS
from .el_dynamics import SYSTEMS

TRAINING_MODES = ("grid", "lattice")
BOUND_MODES = ("radius", "accuracy_for_radius", "gains_for_radius")
V0_MODES = ("zero", "at_initial_error")


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


@dataclass
class SystemSection:
    name: str = "two_link"
    # two-link true and estimated parameters (m1, m2, l1, l2)
    true_params: tuple = (1.0, 1.0, 1.0, 1.0)
    estimate_params: tuple = (0.9, 1.1, 0.9, 1.1)
    disturbance: bool = True
    # one-DOF load parameter
    c: float = 0.0


@dataclass
class TrainingSection:
    mode: str = "lattice"
    lower: tuple = (0.0, 0.0, -1.0, -1.0, 0.0, 0.0)
    upper: tuple = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    resolution: tuple = (1, 1, 1, 1, 1, 1)
    m: int = 576
    noise_std: float = 0.1
    max_iters: int = 200
    tolerance: float = 1e-5
    restarts: int = 0
    tie_lengthscales: bool = False


@dataclass
class ControllerSection:
    kind: str = "gpr_variable"
    Kp: tuple = (7.0,)
    Kd: tuple = (6.0,)
    Kp_scale: float = 400.0
    Kd_scale: float = 400.0


@dataclass
class TrajectorySection:
    amplitude: tuple = (1.0, 1.0)
    phase: tuple = (0.0, 1.5707963267948966)
    omega: float = 1.0
    offset: tuple = (0.0, 0.0)
    q0: tuple = (0.0, 1.0)
    qd0: tuple = (1.0, 0.0)


@dataclass
class SimulationSection:
    horizon: float = 6.283185307179586
    dt: float = 1e-3
    noise_std: float = 0.1
    seed: int = 0


@dataclass
class BoundsSection:
    delta: float = 0.9
    lower: tuple = (-1.0, -1.0, -1.5, -1.5, -1.2, -1.2)
    upper: tuple = (1.0, 1.0, 1.5, 1.5, 1.2, 1.2)
    resolution: tuple = (7, 7, 7, 7, 7, 7)
    eps_fraction: float = 0.5
    v0_mode: str = "zero"
    target_r: float = 1.0
    kd1_values: tuple = (1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0)
    candidates: int = 600
    coverage_points: int = 10000


@dataclass
class StudySection:
    # baseline computed-torque arm
    ctc_Kp: tuple = (10.0,)
    ctc_Kd: tuple = (10.0,)
    # static GP arm: take the per-entry minimum of the variable run's gains
    static_from_variable: bool = True
    # randomized one-DOF study
    n_systems: int = 30
    c_low: float = 0.0
    c_high: float = 6.283185307179586


@dataclass
class OutputSection:
    dir: str = "out"


SECTIONS = {
    "system": SystemSection,
    "training": TrainingSection,
    "controller": ControllerSection,
    "trajectory": TrajectorySection,
    "simulation": SimulationSection,
    "bounds": BoundsSection,
    "study": StudySection,
    "output": OutputSection,
}


@dataclass
class ExperimentConfig:
    system: SystemSection = field(default_factory=SystemSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    controller: ControllerSection = field(default_factory=ControllerSection)
    trajectory: TrajectorySection = field(default_factory=TrajectorySection)
    simulation: SimulationSection = field(default_factory=SimulationSection)
    bounds: BoundsSection = field(default_factory=BoundsSection)
    study: StudySection = field(default_factory=StudySection)
    output: OutputSection = field(default_factory=OutputSection)

    def validate(self) -> "ExperimentConfig":
        if self.system.name not in SYSTEMS:
            raise ConfigError(f"[system] name: unknown system {self.system.name!r}; "
                              f"valid: {', '.join(sorted(SYSTEMS))}")
        if self.controller.kind not in KINDS:
            raise ConfigError(f"[controller] kind: unknown controller kind {self.controller.kind!r}; "
                              f"valid kinds: {', '.join(KINDS)}")
        if self.training.mode not in TRAINING_MODES:
            raise ConfigError(f"[training] mode: expected one of {TRAINING_MODES}")
        n = 2 if self.system.name == "two_link" else 1
        tr = self.training
        if not len(tr.lower) == len(tr.upper) == len(tr.resolution) == 3 * n:
            raise ConfigError(f"[training] lower/upper/resolution need {3 * n} entries")
        b = self.bounds
        if not len(b.lower) == len(b.upper) == len(b.resolution) == 3 * n:
            raise ConfigError(f"[bounds] lower/upper/resolution need {3 * n} entries")
        if not 0 < b.delta < 1:
            raise ConfigError("[bounds] delta must lie in (0, 1)")
        if b.v0_mode not in V0_MODES:
            raise ConfigError(f"[bounds] v0_mode must be one of {V0_MODES}")
        t = self.trajectory
        if len(t.q0) != n or len(t.qd0) != n:
            raise ConfigError(f"[trajectory] q0 and qd0 need {n} entries")
        if b.target_r <= 0 or not 0 < b.eps_fraction < 1:
            raise ConfigError("[bounds] need target_r > 0 and eps_fraction in (0, 1)")
        st = self.study
        if st.n_systems < 1 or not st.c_low <= st.c_high:
            raise ConfigError("[study] need n_systems >= 1 and c_low <= c_high")
        for name, K in (("[controller] Kp", self.controller.Kp), ("[controller] Kd", self.controller.Kd),
                        ("[study] ctc_Kp", st.ctc_Kp), ("[study] ctc_Kd", st.ctc_Kd)):
            if len(K) not in (1, n):
                raise ConfigError(f"{name} needs 1 or {n} entries")
        if self.simulation.dt <= 0 or self.simulation.horizon < self.simulation.dt:
            raise ConfigError("[simulation] need dt > 0 and horizon >= dt")
        return self

    @property
    def n(self) -> int:
        return 2 if self.system.name == "two_link" else 1


def _parse_value(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            conv = int if default and all(isinstance(v, int) for v in default) else float
            return tuple(conv(v) for v in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    return str(value)


def _line_of(text: str, section: str, key: str) -> int | None:
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
        elif current == section and s.split("=", 1)[0].strip() == key:
            return i
    return None


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = ExperimentConfig()
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{sec}]; valid: {', '.join(SECTIONS)}")
        target = getattr(cfg, sec)
        known = {f.name: f for f in fields(target)}
        for key, raw in cp[sec].items():
            line = _line_of(text, sec, key)
            where = f"{source}:{line} [{sec}] {key}" if line else f"{source} [{sec}] {key}"
            if key not in known:
                raise ConfigError(f"{where}: unknown field; valid: {', '.join(known)}")
            setattr(target, key, _parse_value(raw, getattr(target, key), where))
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for name in SECTIONS:
        sec = getattr(cfg, name)
        cp[name] = {f.name: _format_value(getattr(sec, f.name)) for f in fields(sec)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
