"""Nonlocal (look-ahead) LWR traffic flow on a ring road: simulation, KDE field
reconstruction and physics-constrained learning of the density field, the
speed-density law and the look-ahead kernel."""

from .fundamental import FdParams, fd_deriv, fd_eval
from .grid import ConfigError, Field, MeasurementSet, RingGrid, TrajectorySet
from .kernels import DiscreteKernel, kernel_constant, kernel_linear, kernel_normalize
from .solver import SolverConfig, nonlocal_density, simulate, step

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DiscreteKernel", "FdParams", "Field", "MeasurementSet", "RingGrid", "SolverConfig",
    "TrajectorySet", "fd_deriv", "fd_eval", "kernel_constant", "kernel_linear", "kernel_normalize",
    "nonlocal_density", "simulate", "step",
]
