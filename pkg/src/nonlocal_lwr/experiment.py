"""End-to-end pipeline: synthetic truth, measurements, training, reports, sweeps."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import mlp
from .config import ExperimentConfig, require_seed, write_config
from .evaluation import EvalReport, export_report, make_report
from .fundamental import fd_eval
from .grid import (ConfigError, Field, MeasurementSet, TrajectorySet, evenly_spaced_detectors,
                   subsample_measurements)
from .kde import synth_trajectories
from .kernels import DiscreteKernel, local_kernel, make_kernel, n_cells
from .loss import ClosedFormFd, CollocationSet, DensityModel, LearnedFd, LossWeights, PinnProblem
from .solver import SolverConfig, required_substeps, simulate, sinusoid_profile, speed_field
from .training import (TrainSettings, TrainState, init_state, learned_kernel, load_checkpoint, subseed,
                       subseed_rng, train)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# synthetic data

def solver_config(cfg: ExperimentConfig) -> SolverConfig:
    grid = cfg.ring_grid()
    s = cfg.solver
    fd = cfg.fd_params()
    kernel = make_kernel(s.kernel, s.eta_m, grid.dx_m)
    substeps = s.substeps or required_substeps(grid, fd, s.cfl_safety)
    return SolverConfig(grid, fd, sinusoid_profile(grid, s.ic_mean_vpm, s.ic_amplitude_vpm), kernel,
                        s.cfl_safety, substeps)


def truth_fields(cfg: ExperimentConfig) -> tuple[Field, Field]:
    """Ground-truth density and the equilibrium speed ``V(rho_eta)`` that moved it."""
    sc = solver_config(cfg)
    rho = simulate(sc)
    return rho, speed_field(rho, sc.fd, sc.kernel)


def vehicle_trajectories(cfg: ExperimentConfig, rho: Field, v: Field) -> TrajectorySet:
    """Probe vehicles started at uniformly random positions (``vehicles`` sub-seed)."""
    rng = subseed_rng(cfg.seed, "vehicles")
    x0 = np.sort(rng.uniform(0.0, rho.grid.ring_length_m, cfg.kde.n_vehicles))
    return synth_trajectories(rho, v, cfg.kde.n_vehicles, x0=x0)


def measurements(cfg: ExperimentConfig, truth: Field) -> MeasurementSet:
    return subsample_measurements(truth, evenly_spaced_detectors(cfg.training.n_detectors, truth.grid))


# ---------------------------------------------------------------------------
# training

def build_problem(cfg: ExperimentConfig, truth: Field, kernel: Optional[str] = None,
                  eta_m: Optional[float] = None) -> PinnProblem:
    """Training problem for ``cfg``; ``kernel``/``eta_m`` override the training section."""
    t = cfg.training
    grid = truth.grid
    kind = kernel or t.kernel
    eta = t.eta_m if eta_m is None else eta_m
    if kind != "local" and eta is None:
        raise ConfigError(f"training.eta_m is required for the {kind} kernel")
    dspec = mlp.MlpSpec(3, t.density_layers, t.density_width, 1, "tanh", "softplus")
    density = DensityModel(dspec, grid.horizon_s, grid.ring_length_m, t.rho_scale_vpm, t.time_scale_s or None)
    if t.fd_model == "learned":
        fd = LearnedFd(mlp.MlpSpec(1, t.fd_layers, t.fd_width), t.rho_scale_vpm, t.v_scale_mps)
    else:
        fd = ClosedFormFd(cfg.fd_params())
    if kind == "learned":
        ker, n_eta = "learned", n_cells(eta, grid.dx_m)
    elif kind == "local":
        ker, n_eta = local_kernel(grid.dx_m), None
    else:
        ker, n_eta = make_kernel(kind, eta, grid.dx_m), None
    weights = LossWeights(t.alpha_initial, (t.alpha_detector,), t.p_omega_1, t.p_omega_2, t.p_v_1, t.p_v_2)
    colloc = CollocationSet.sample(grid, t.n_collocation, subseed(cfg.seed, "collocation"))
    return PinnProblem(grid, measurements(cfg, truth), colloc, density, fd, ker, weights,
                       t.rho_max_vpm, t.n_rho, n_eta)


def train_settings(cfg: ExperimentConfig) -> TrainSettings:
    t = cfg.training
    return TrainSettings(adam_iters=t.adam_iters, lbfgs_iters=t.lbfgs_iters, lr=t.lr,
                         lbfgs_history=t.lbfgs_history, checkpoint_every=t.checkpoint_every)


def estimate_field(problem: PinnProblem, state: TrainState) -> Field:
    g = problem.grid
    X, _, _ = problem.density.encode(np.repeat(g.t, g.n_x), np.tile(g.x, g.n_t))
    rho = problem.density.evaluate_encoded(state.theta, X)[0]
    return Field(g, rho.reshape(g.shape))


def speed_function(problem: PinnProblem, state: TrainState):
    fd = problem.fd
    if isinstance(fd, ClosedFormFd):
        return lambda rho: fd_eval(fd.params, np.maximum(np.asarray(rho, dtype=float), 0.0))
    return lambda rho: fd.evaluate(state.theta_v, rho)[0]


def report_for(problem: PinnProblem, state: TrainState, truth: Optional[Field],
               v_truth: Optional[Field] = None) -> tuple[EvalReport, Field]:
    est = estimate_field(problem, state)
    kernel = learned_kernel(problem, state)
    rep = make_report(est, truth, kernel, speed_function(problem, state), problem.rho_max, problem.n_rho, v_truth)
    return rep, est


@dataclass
class TrainOutcome:
    state: TrainState
    report: EvalReport
    out_dir: Path


def run_training(cfg: ExperimentConfig, truth: Field, out_dir, v_truth: Optional[Field] = None,
                 resume=None, kernel: Optional[str] = None, eta_m: Optional[float] = None,
                 figures: bool = True, stop_after: Optional[int] = None) -> TrainOutcome:
    """Train, then write ``checkpoint.bin``, ``config.ini`` and ``report/`` under ``out_dir``."""
    require_seed(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if kernel is not None or eta_m is not None:
        cfg = cfg.replace("training", **{k: v for k, v in (("kernel", kernel), ("eta_m", eta_m)) if v is not None})
    problem = build_problem(cfg, truth)
    settings = train_settings(cfg)
    if resume is not None:
        state = load_checkpoint(resume)
        if state.sizes != _expected_sizes(problem):
            raise ConfigError(f"checkpoint {resume} does not match the configured networks/kernel")
    else:
        state = init_state(problem, cfg.seed, settings)
    write_config(cfg, out / "config.ini")
    state = train(problem, state, settings, checkpoint_path=out / cfg.paths.checkpoint, stop_after=stop_after)
    rep, est = report_for(problem, state, truth, v_truth)
    export_report(rep, out / cfg.paths.report_dir, est, state.trace, truth, figures=figures)
    return TrainOutcome(state, rep, out)


def _expected_sizes(problem: PinnProblem) -> tuple[int, int, int]:
    n_v = problem.fd.n_params if problem.fd.trainable else 0
    return (problem.density.n_params, n_v, problem.n_eta if problem.learns_kernel else 0)


def evaluate_checkpoint(cfg: ExperimentConfig, truth: Field, checkpoint, out_dir,
                        v_truth: Optional[Field] = None, figures: bool = True) -> EvalReport:
    problem = build_problem(require_seed(cfg), truth)
    state = load_checkpoint(checkpoint)
    if state.sizes != _expected_sizes(problem):
        raise ConfigError(f"checkpoint {checkpoint} does not match the configured networks/kernel")
    rep, est = report_for(problem, state, truth, v_truth)
    export_report(rep, Path(out_dir), est, state.trace, truth, figures=figures)
    return rep


# ---------------------------------------------------------------------------
# sweeps

SWEEP_HEADER = "param,value,e_rho_pct,e_v_pct,mass_fraction_4m,mass_fraction_10m,status"


@dataclass
class SweepRow:
    param: str
    value: float
    e_rho_pct: float = float("nan")
    e_v_pct: Optional[float] = None
    mass_fraction_4m: float = float("nan")
    mass_fraction_10m: float = float("nan")
    kernel: Optional[DiscreteKernel] = None
    status: str = "ok"

    def line(self) -> str:
        ev = "none" if self.e_v_pct is None else repr(self.e_v_pct)
        return (f"{self.param},{self.value!r},{self.e_rho_pct!r},{ev},{self.mass_fraction_4m!r},"
                f"{self.mass_fraction_10m!r},{self.status}")


def _sweep_config(cfg: ExperimentConfig, param: str, value: float) -> ExperimentConfig:
    if param == "eta_m":
        return cfg.replace("training", eta_m=value)
    return cfg.replace("training", alpha_initial=value, alpha_detector=value)


def _sweep_job(args) -> SweepRow:
    run_cfg, truth, v_truth, param, value, out_dir, figures = args
    try:
        res = run_training(run_cfg, truth, out_dir, v_truth, figures=figures)
    except (ArithmeticError, RuntimeError, ValueError) as exc:
        log.warning("%s=%g failed: %s", param, value, exc)
        return SweepRow(param, value, status=f"failed: {exc}".replace(",", ";").replace("\n", " "))
    r = res.report
    return SweepRow(param, value, r.e_rho_pct, r.e_v_pct, r.mass_fraction_4m, r.mass_fraction_10m,
                    r.kernel_snapshot)


def run_sweep(cfg: ExperimentConfig, truth: Field, param: str, values: Sequence[float], out_dir,
              v_truth: Optional[Field] = None, jobs: int = 1, figures: bool = True) -> list[SweepRow]:
    """One training per value; ``param`` is ``eta_m`` or ``alpha``. Failures are recorded, not raised."""
    if param not in ("eta_m", "alpha"):
        raise ConfigError(f"cannot sweep over {param!r}")
    if not values:
        raise ConfigError("sweep list is empty")
    require_seed(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # invalid grid values are config errors and stop the sweep before any training
    configs = [_sweep_config(cfg, param, float(v)) for v in values]
    args = [(c, truth, v_truth, param, float(v), out / f"{param}_{float(v):g}", figures)
            for c, v in zip(configs, values)]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(args))) as pool:
            rows = list(pool.map(_sweep_job, args))
    else:
        rows = [_sweep_job(a) for a in args]
    write_sweep_table(rows, out / "sweep.csv")
    return rows


def best_row(rows: Sequence[SweepRow]) -> Optional[SweepRow]:
    ok = [r for r in rows if r.status == "ok" and np.isfinite(r.e_rho_pct)]
    return min(ok, key=lambda r: r.e_rho_pct) if ok else None


def write_sweep_table(rows: Sequence[SweepRow], path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(SWEEP_HEADER + "\n")
        for r in rows:
            fh.write(r.line() + "\n")
    return path
