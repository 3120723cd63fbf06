"""Command-line entry point: ``gpctc {train, simulate, bounds, reproduce}``.

Exit codes: 0 success, 2 usage or config error, 3 numerical failure,
4 reproduction threshold failure, 5 missing input file.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__, experiments, storage
from .config import BOUND_MODES, ConfigError, ExperimentConfig, load_config, parse_config
from .errors import ConditioningError, DynamicsSolveError, InfeasibleError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_THRESHOLD = 4
EXIT_NOT_FOUND = 5

log = logging.getLogger("gpctc")


def bundled_config(name: str) -> ExperimentConfig:
    """One of the reproduction configs shipped with the package."""
    ref = resources.files("gpctc") / "configs" / f"{name}.ini"
    return parse_config(ref.read_text(), f"<bundled {name}.ini>")


def _load(args, default: str | None = None) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    elif default:
        cfg = bundled_config(default)
    else:
        raise ConfigError("--config is required for this subcommand")
    if args.seed is not None:
        cfg = replace(cfg, simulation=replace(cfg.simulation, seed=args.seed))
    if args.out:
        cfg = replace(cfg, output=replace(cfg.output, dir=args.out))
    return cfg.validate()


def cmd_train(args) -> int:
    cfg = _load(args)
    out = storage.ensure_dir(cfg.output.dir)
    t0 = time.perf_counter()
    data, gp, lml = experiments.train(cfg)
    experiments.save_model(out, data, gp)
    print(f"trained on {data.m} samples in {time.perf_counter() - t0:.1f} s")
    for i, (h, ll) in enumerate(zip(gp.hypers, lml)):
        ell = ", ".join(f"{v:.4g}" for v in h.lengthscales)
        print(f"output {i + 1}: log-likelihood {ll:.6f}  signal_std {h.signal_std:.4g}  "
              f"noise_std {h.noise_std:.4g}  lengthscales ({ell})")
    print(f"wrote {out / experiments.TRAINING_CSV} and {out / experiments.HYPER_FILE}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load(args)
    out = storage.ensure_dir(cfg.output.dir)
    gains = experiments.gains_from_config(cfg)
    gp = experiments.load_model(out) if gains.uses_gp else None
    traj, metrics = experiments.run(cfg, gains, gp)
    storage.write_trajectory_csv(out / "trajectory.csv", traj)
    storage.write_metrics_csv(out / "metrics.csv", metrics.as_dict())
    print(experiments.format_table(("metric", "value"), list(metrics.as_dict().items())))
    print(f"gain norm range: Kp [{traj.Kp_norm.min():.4g}, {traj.Kp_norm.max():.4g}]  "
          f"Kd [{traj.Kd_norm.min():.4g}, {traj.Kd_norm.max():.4g}]")
    print(f"wrote {out / 'trajectory.csv'} and {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_bounds(args) -> int:
    cfg = _load(args)
    out = storage.ensure_dir(cfg.output.dir)
    gains = experiments.gains_from_config(cfg)
    gp = experiments.load_model(out) if gains.uses_gp else None
    report = experiments.bound_report(cfg, gp, args.mode, out)
    experiments.write_report(out, report)
    print(experiments.format_table(report.header, report.rows))
    return EXIT_OK


def cmd_reproduce(args) -> int:
    cfg = _load(args, default=args.which)
    out = storage.ensure_dir(cfg.output.dir)
    t0 = time.perf_counter()
    report = experiments.REPRODUCTIONS[args.which](cfg)
    paths = experiments.write_report(out, report)
    print(experiments.format_table(report.header, report.rows))
    print()
    print(experiments.format_checks(report))
    print(f"{args.which}: {'PASS' if report.passed else 'FAIL'} "
          f"in {time.perf_counter() - t0:.1f} s; wrote {', '.join(str(p) for p in paths)}")
    return EXIT_OK if report.passed else EXIT_THRESHOLD


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config file (INI sections)")
    common.add_argument("--seed", type=int, help="override [simulation] seed")
    common.add_argument("--out", help="override [output] dir")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="gpctc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common], help="generate training data and fit the GP")
    s.set_defaults(func=cmd_train)
    s = sub.add_parser("simulate", parents=[common], help="run one closed-loop simulation")
    s.set_defaults(func=cmd_simulate)
    s = sub.add_parser("bounds", parents=[common], help="stability-bound report")
    s.add_argument("--mode", choices=BOUND_MODES, default="radius")
    s.set_defaults(func=cmd_bounds)
    s = sub.add_parser("reproduce", parents=[common], help="run a bundled reproduction")
    s.add_argument("which", choices=sorted(experiments.REPRODUCTIONS))
    s.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"not found: {exc}", file=sys.stderr)
        return EXIT_NOT_FOUND
    except InfeasibleError as exc:
        print(f"infeasible bound ({exc.term}): {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DynamicsSolveError as exc:
        where = f" at step {exc.step}" if exc.step is not None else ""
        print(f"numerical failure{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConditioningError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
