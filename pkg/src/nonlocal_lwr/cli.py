"""Command-line entry point: ``nonlocal-lwr <subcommand> --config FILE``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import experiment
from .config import ExperimentConfig, load_config, require_seed, write_config
from .grid import ConfigError, read_field, read_trajectories, write_field, write_trajectories
from .kde import KdeConfig, reconstruct_density, reconstruct_speed
from .kernels import DegenerateKernelError
from .solver import SolverError
from .training import TrainingDiverged

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("nonlocal_lwr")


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("list is empty")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config file (INI)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="override training.seed")
    common.add_argument("--jobs", type=int, default=1, help="parallel sweep jobs")
    common.add_argument("--no-figures", action="store_true", help="skip PNG rendering in reports")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nonlocal-lwr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="generate ground-truth fields and probe trajectories")
    r = sub.add_parser("reconstruct", parents=[common], help="KDE density/speed fields from trajectories")
    r.add_argument("--trajectories", type=Path, help="trajectory file (default: paths.trajectories)")
    t = sub.add_parser("train", parents=[common], help="physics-constrained training + report")
    t.add_argument("--resume", type=Path, help="continue from a checkpoint")
    t.add_argument("--kernel", choices=("learned", "constant", "linear", "local"))
    t.add_argument("--eta", type=float, help="kernel length in metres")
    e = sub.add_parser("evaluate", parents=[common], help="report for an existing checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    s = sub.add_parser("sweep", parents=[common], help="one training per eta or alpha value")
    grp = s.add_mutually_exclusive_group(required=True)
    grp.add_argument("--etas", type=_float_list)
    grp.add_argument("--alpha-grid", type=_float_list)
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace("training", seed=args.seed)
    return cfg


def _truth(cfg: ExperimentConfig, out: Path):
    """Truth fields from the configured paths if present, else simulated on the fly."""
    rho_p, v_p = _resolve(out, cfg.paths.truth_rho), _resolve(out, cfg.paths.truth_v)
    if rho_p.exists():
        rho = read_field(rho_p)
        v = read_field(v_p) if v_p.exists() else None
        if rho.grid != cfg.ring_grid():
            raise ConfigError(f"{rho_p} was written on a different grid than the config describes")
        return rho, v
    log.info("no truth field at %s; simulating", rho_p)
    return experiment.truth_fields(cfg)


def _resolve(out: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else out / path


def cmd_simulate(cfg, args) -> int:
    require_seed(cfg)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    rho, v = experiment.truth_fields(cfg)
    write_field(rho, _resolve(out, cfg.paths.truth_rho))
    write_field(v, _resolve(out, cfg.paths.truth_v))
    write_trajectories(experiment.vehicle_trajectories(cfg, rho, v), _resolve(out, cfg.paths.trajectories))
    write_config(cfg, out / "config.ini")
    return EXIT_OK


def cmd_reconstruct(cfg, args) -> int:
    out = args.out
    src = args.trajectories or _resolve(out, cfg.paths.trajectories)
    traj = read_trajectories(src)
    kc = KdeConfig(cfg.ring_grid(), cfg.kde.bandwidth_x_m, cfg.kde.bandwidth_t_s)
    out.mkdir(parents=True, exist_ok=True)
    write_field(reconstruct_density(traj, kc), out / "kde_rho.csv")
    v, _ = reconstruct_speed(traj, kc)
    write_field(v, out / "kde_v.csv")
    return EXIT_OK


def cmd_train(cfg, args) -> int:
    require_seed(cfg)
    rho, v = _truth(cfg, args.out)
    res = experiment.run_training(cfg, rho, args.out, v, resume=args.resume, kernel=args.kernel,
                                  eta_m=args.eta, figures=not args.no_figures)
    _print_summary(res.report.summary())
    return EXIT_OK


def cmd_evaluate(cfg, args) -> int:
    rho, v = _truth(cfg, args.out)
    rep = experiment.evaluate_checkpoint(cfg, rho, args.checkpoint, args.out / cfg.paths.report_dir, v,
                                         figures=not args.no_figures)
    _print_summary(rep.summary())
    return EXIT_OK


def cmd_sweep(cfg, args) -> int:
    require_seed(cfg)
    rho, v = _truth(cfg, args.out)
    param, values = ("eta_m", args.etas) if args.etas else ("alpha", args.alpha_grid)
    rows = experiment.run_sweep(cfg, rho, param, values, args.out, v, jobs=args.jobs,
                                figures=not args.no_figures)
    print(experiment.SWEEP_HEADER)
    for r in rows:
        print(r.line())
    best = experiment.best_row(rows)
    if param == "alpha" and best is not None:
        print(f"# selected alpha={best.value!r} (e_rho_pct={best.e_rho_pct!r})")
    return EXIT_OK


def _print_summary(values: dict) -> None:
    for k, v in values.items():
        print(f"{k}={v}")


COMMANDS = {"simulate": cmd_simulate, "reconstruct": cmd_reconstruct, "train": cmd_train,
            "evaluate": cmd_evaluate, "sweep": cmd_sweep}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = _config(args)
        return COMMANDS[args.command](cfg, args)
    except TrainingDiverged as exc:
        print(f"error: {exc} (last finite iteration {exc.last_finite_iteration})", file=sys.stderr)
        return EXIT_NUMERIC
    except (SolverError, DegenerateKernelError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
