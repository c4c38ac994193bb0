"""Forward simulation of local and look-ahead LWR on the ring.

Conservative first-order upwind scheme. The flux out of cell ``j`` into
``j + 1`` is ``F_j = rho_j * V(rho_eta_j)``; speeds are non-negative so the
upwind side is always the left neighbour.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .fundamental import FdParams, fd_eval
from .grid import ConfigError, Field, RingGrid
from .kernels import DiscreteKernel


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SolverConfig:
    """Simulation setup.

    ``grid`` is the output grid. Each output interval is split into
    ``substeps`` explicit steps of length ``grid.dt_s / substeps``; the CFL
    condition is checked against that inner step and never adjusted.
    """

    grid: RingGrid
    fd: FdParams
    initial_profile: np.ndarray
    kernel: Optional[DiscreteKernel] = None
    cfl_safety: float = 0.9
    substeps: int = 1

    def __post_init__(self):
        prof = np.array(self.initial_profile, dtype=float)
        if prof.shape != (self.grid.n_x,):
            raise ConfigError(f"initial profile has shape {prof.shape}, expected ({self.grid.n_x},)")
        if np.any(prof < 0):
            raise ConfigError("initial profile must be non-negative")
        prof.setflags(write=False)
        object.__setattr__(self, "initial_profile", prof)
        if self.kernel is not None and not math.isclose(self.kernel.dx_m, self.grid.dx_m):
            raise ConfigError(f"kernel dx {self.kernel.dx_m} does not match grid dx {self.grid.dx_m}")
        if not 0 < self.cfl_safety <= 1:
            raise ConfigError("cfl_safety must lie in (0, 1]")
        if self.substeps < 1:
            raise ConfigError("substeps must be >= 1")

    @property
    def step_dt(self) -> float:
        return self.grid.dt_s / self.substeps


def required_substeps(grid: RingGrid, fd: FdParams, cfl_safety: float = 0.9) -> int:
    """Smallest substep count that satisfies CFL for any density (speed bounded by v_f)."""
    return max(1, math.ceil(grid.dt_s * fd.v_f / (cfl_safety * grid.dx_m) - 1e-12))


def sinusoid_profile(grid: RingGrid, mean: float = 0.05, amplitude: float = 0.02) -> np.ndarray:
    """``mean + amplitude * sin(2 pi x / L)`` at cell centres."""
    return mean + amplitude * np.sin(2.0 * np.pi * grid.x / grid.ring_length_m)


def nonlocal_density(rho_row, kernel: DiscreteKernel) -> np.ndarray:
    """Downstream weighted average ``sum_k rho[j + k] w_k`` with periodic wrap."""
    rho_row = np.asarray(rho_row, dtype=float)
    w = kernel.weights
    out = w[0] * rho_row
    n = len(rho_row)
    for k in range(1, len(w)):
        out = out + w[k] * np.roll(rho_row, -(k % n))
    return out


def _speed(rho_row, config: SolverConfig) -> np.ndarray:
    r = rho_row if config.kernel is None else nonlocal_density(rho_row, config.kernel)
    return fd_eval(config.fd, r)


def step(rho_row, config: SolverConfig) -> np.ndarray:
    """One explicit update of length ``config.step_dt``."""
    rho_row = np.asarray(rho_row, dtype=float)
    v = _speed(rho_row, config)
    lam = config.step_dt / config.grid.dx_m
    vmax = float(v.max())
    if config.step_dt * vmax > config.cfl_safety * config.grid.dx_m:
        raise SolverError(
            f"CFL violated: max speed {vmax:.6g} m/s with dt={config.step_dt:.6g} s, "
            f"dx={config.grid.dx_m:.6g} m, safety={config.cfl_safety}"
        )
    flux = rho_row * v
    return rho_row - lam * (flux - np.roll(flux, 1))


def simulate(config: SolverConfig) -> Field:
    g = config.grid
    out = np.empty(g.shape)
    rho = config.initial_profile.copy()
    out[0] = rho
    for i in range(1, g.n_t):
        for s in range(config.substeps):
            try:
                rho = step(rho, config)
            except SolverError as exc:
                raise SolverError(f"at output step {i} (substep {s}): {exc}") from None
        out[i] = rho
    return Field(g, out)


def speed_field(rho: Field, fd: FdParams, kernel: Optional[DiscreteKernel] = None) -> Field:
    """Equilibrium speed ``V(rho_eta)`` on every cell of a density field."""
    vals = rho.values
    if kernel is not None:
        vals = np.stack([nonlocal_density(row, kernel) for row in vals])
    return Field(rho.grid, fd_eval(fd, np.maximum(vals, 0.0)))


def max_abs_gradient(rho: Field) -> np.ndarray:
    """Per-time-row max of the periodic forward difference ``|rho_{j+1} - rho_j| / dx``."""
    d = np.abs(np.roll(rho.values, -1, axis=1) - rho.values) / rho.grid.dx_m
    return d.max(axis=1)
