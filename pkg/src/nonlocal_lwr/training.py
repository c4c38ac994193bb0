"""Two-phase training (ADAM then L-BFGS) with checkpoint/resume."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import mlp
from .grid import LossTrace
from .kernels import DegenerateKernelError, DiscreteKernel, kernel_normalize
from .loss import LossResult, PinnProblem
from .optim import AdamState, LbfgsState, OptimizerError, adam_step, lbfgs_step

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"NLWRCKPT1\n"

# named sub-seeds derived from the single experiment seed
SUBSEEDS = {"init": 1, "collocation": 2, "vehicles": 3}


def subseed_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), SUBSEEDS[name]])


def subseed(seed: int, name: str) -> int:
    return int(subseed_rng(seed, name).integers(2**63 - 1))


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_finite_iteration: int):
        super().__init__(message)
        self.last_finite_iteration = last_finite_iteration


@dataclass
class TrainSettings:
    adam_iters: int = 5000
    lbfgs_iters: int = 500
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lbfgs_history: int = 20
    lbfgs_c1: float = 1e-4
    lbfgs_c2: float = 0.9
    lbfgs_max_evals: int = 25
    lbfgs_grad_tol: float = 1e-9
    checkpoint_every: int = 0
    log_every: int = 500


@dataclass
class TrainState:
    theta: np.ndarray
    theta_v: np.ndarray
    theta_omega: Optional[np.ndarray]
    iteration: int = 0
    phase: str = "adam"
    adam: AdamState = field(default_factory=AdamState)
    lbfgs: LbfgsState = field(default_factory=LbfgsState)
    trace: LossTrace = field(default_factory=LossTrace)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return (len(self.theta), len(self.theta_v), 0 if self.theta_omega is None else len(self.theta_omega))

    def flat(self) -> np.ndarray:
        parts = [self.theta, self.theta_v]
        if self.theta_omega is not None:
            parts.append(self.theta_omega)
        return np.concatenate(parts)

    def split(self, flat: np.ndarray):
        n1, n2, n3 = self.sizes
        theta = flat[:n1].copy()
        theta_v = flat[n1:n1 + n2].copy()
        theta_omega = flat[n1 + n2:].copy() if self.theta_omega is not None else None
        return theta, theta_v, theta_omega

    def set_flat(self, flat: np.ndarray) -> None:
        self.theta, self.theta_v, self.theta_omega = self.split(flat)


def init_state(problem: PinnProblem, seed: int, settings: TrainSettings = TrainSettings()) -> TrainState:
    """Glorot-initialised networks, uniform kernel with unit sum.

    The density network's output bias is set so the initial field equals the
    mean of the measurements. The speed network starts flat at ``v_scale``
    (zero output weights, unit output bias): a random Glorot curve is almost
    always increasing or negative somewhere, and the resulting penalty
    gradients would swamp ADAM's second-moment estimates for the whole run.
    """
    rng = subseed_rng(seed, "init")
    theta = mlp.glorot_init(problem.density.spec, rng)
    mean_rho = float(np.mean(np.concatenate([problem.meas.initial_profile, problem.meas.detector_series.ravel()])))
    u = max(mean_rho / problem.density.rho_scale, 1e-6)
    theta[-1] = np.log(np.expm1(u))
    if problem.fd.trainable:
        theta_v = mlp.glorot_init(problem.fd.spec, rng)
        width_in = problem.fd.spec.layer_sizes[-2]
        theta_v[-(width_in + 1):-1] = 0.0
        theta_v[-1] = 1.0
    else:
        theta_v = np.zeros(0)
    # unit sum: ADAM moves each raw weight by about lr per step, which must be
    # small against the weight itself
    theta_omega = np.full(problem.n_eta, 1.0 / problem.n_eta) if problem.learns_kernel else None
    return TrainState(theta, theta_v, theta_omega,
                      adam=AdamState(settings.lr, settings.beta1, settings.beta2, settings.eps),
                      lbfgs=LbfgsState(settings.lbfgs_history, settings.lbfgs_c1, settings.lbfgs_c2,
                                       settings.lbfgs_max_evals, settings.lbfgs_grad_tol))


def _flat_grad(r: LossResult, state: TrainState) -> np.ndarray:
    parts = [r.g_theta, r.g_theta_v]
    if state.theta_omega is not None:
        parts.append(r.g_theta_omega)
    return np.concatenate(parts)


def learned_kernel(problem: PinnProblem, state: TrainState) -> DiscreteKernel:
    dx = problem.grid.dx_m
    if state.theta_omega is None:
        w = problem.fixed_kernel
        return DiscreteKernel(len(w) * dx, dx, w)
    return kernel_normalize(state.theta_omega, dx)


def train(problem: PinnProblem, state: TrainState, settings: TrainSettings,
          checkpoint_path=None, stop_after: Optional[int] = None) -> TrainState:
    """Continue training from ``state`` through both phases.

    ``stop_after`` halts once the global iteration count reaches it (used to
    produce mid-run checkpoints).
    """
    total_iters = settings.adam_iters + settings.lbfgs_iters
    last = {}

    def evaluate(flat, want_grad=True):
        th, tv, to = state.split(flat)
        try:
            r = problem.evaluate(th, tv, to, want_grad=want_grad)
        except DegenerateKernelError as exc:
            raise TrainingDiverged(f"degenerate kernel at iteration {state.iteration}: {exc}",
                                   state.iteration - 1) from None
        return r

    def loss_and_grad(flat):
        r = evaluate(flat)
        last["x"], last["r"] = flat, r
        if not np.isfinite(r.total):
            return np.inf, np.full_like(flat, np.nan)
        return r.total, _flat_grad(r, state)

    t0 = time.perf_counter()
    while state.phase != "done":
        if stop_after is not None and state.iteration >= stop_after:
            break
        if state.phase == "adam":
            if state.iteration >= settings.adam_iters:
                state.phase = "lbfgs"
                continue
            flat = state.flat()
            r = evaluate(flat)
            if not np.isfinite(r.total):
                raise TrainingDiverged(f"non-finite loss at iteration {state.iteration}", state.iteration - 1)
            state.trace.append(state.iteration, r.total, r.data, r.phy_d, r.phy_s)
            try:
                state.adam, flat = adam_step(state.adam, flat, _flat_grad(r, state))
            except OptimizerError as exc:
                raise TrainingDiverged(f"iteration {state.iteration}: {exc}", state.iteration - 1) from None
            state.set_flat(flat)
        else:
            if state.iteration >= total_iters:
                state.phase = "done"
                continue
            flat = state.flat()
            try:
                state.lbfgs, new_flat, converged = lbfgs_step(state.lbfgs, flat, loss_and_grad)
            except OptimizerError as exc:
                raise TrainingDiverged(f"iteration {state.iteration}: {exc}", state.iteration - 1) from None
            if new_flat is not flat:
                r = last["r"] if np.array_equal(last.get("x"), new_flat) else evaluate(new_flat, False)
                state.set_flat(new_flat)
            else:
                r = evaluate(flat, False)
            state.trace.append(state.iteration, r.total, r.data, r.phy_d, r.phy_s)
            if converged:
                log.info("L-BFGS stopped at iteration %d: %s", state.iteration, state.lbfgs.message)
                state.iteration += 1
                state.phase = "done"
                break
        state.iteration += 1
        if settings.log_every and state.iteration % settings.log_every == 0:
            row = state.trace.rows[-1]
            log.info("iter %d [%s] loss %.4e data %.3e phy_d %.3e phy_s %.3e (%.0fs)",
                     row[0], state.phase, row[1], row[2], row[3], row[4], time.perf_counter() - t0)
        if checkpoint_path and settings.checkpoint_every and state.iteration % settings.checkpoint_every == 0:
            save_checkpoint(state, checkpoint_path)
    if checkpoint_path:
        save_checkpoint(state, checkpoint_path)
    return state


# ---------------------------------------------------------------------------
# checkpoints: magic, one JSON header line, then raw little-endian float64 blocks

def _arrays(state: TrainState) -> dict:
    arrs = {"theta": state.theta, "theta_v": state.theta_v}
    if state.theta_omega is not None:
        arrs["theta_omega"] = state.theta_omega
    if state.adam.m is not None:
        arrs["adam_m"] = state.adam.m
        arrs["adam_v"] = state.adam.v
    if state.lbfgs.g is not None:
        arrs["lbfgs_g"] = state.lbfgs.g
    for k, (s, y) in enumerate(zip(state.lbfgs.s_hist, state.lbfgs.y_hist)):
        arrs[f"lbfgs_s{k}"] = s
        arrs[f"lbfgs_y{k}"] = y
    if state.trace.rows:
        arrs["trace"] = np.array(state.trace.rows, dtype=float)
    return arrs


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    arrs = _arrays(state)
    a, b = state.adam, state.lbfgs
    header = {
        "format": 1,
        "iteration": state.iteration,
        "phase": state.phase,
        "adam": {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "step": a.step},
        "lbfgs": {"history_size": b.history_size, "c1": b.c1, "c2": b.c2, "max_evals": b.max_evals,
                  "grad_tol": b.grad_tol, "f": b.f, "n_iter": b.n_iter, "n_evals": b.n_evals,
                  "message": b.message, "n_pairs": len(b.s_hist)},
        "arrays": [[k, list(v.shape)] for k, v in arrs.items()],
    }
    # float.hex keeps scalar floats exact inside the JSON header
    header["adam"] = {k: (v.hex() if isinstance(v, float) else v) for k, v in header["adam"].items()}
    header["lbfgs"] = {k: (v.hex() if isinstance(v, float) else v) for k, v in header["lbfgs"].items()}
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for v in arrs.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return path


def _unhex(d):
    return {k: (float.fromhex(v) if isinstance(v, str) and v.startswith(("0x", "-0x", "inf", "-inf")) else v)
            for k, v in d.items()}


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as fh:
        if fh.readline() != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a training checkpoint")
        header = json.loads(fh.readline())
        raw = fh.read()
    arrs, pos = {}, 0
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        arrs[name] = np.frombuffer(raw[pos:pos + 8 * n], dtype="<f8").astype(float).reshape(shape)
        pos += 8 * n
    a = _unhex(header["adam"])
    b = _unhex(header["lbfgs"])
    adam = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], arrs.get("adam_m"), arrs.get("adam_v"), a["step"])
    n_pairs = b.pop("n_pairs")
    lb = LbfgsState(b["history_size"], b["c1"], b["c2"], b["max_evals"], b["grad_tol"],
                    [arrs[f"lbfgs_s{k}"] for k in range(n_pairs)],
                    [arrs[f"lbfgs_y{k}"] for k in range(n_pairs)],
                    b["f"], arrs.get("lbfgs_g"), b["n_iter"], b["n_evals"], b["message"])
    trace = LossTrace()
    for row in arrs.get("trace", np.zeros((0, 5))):
        trace.append(int(row[0]), *row[1:])
    return TrainState(arrs["theta"], arrs["theta_v"], arrs.get("theta_omega"), header["iteration"],
                      header["phase"], adam, lb, trace)
