"""Cell-integrated look-ahead kernels.

A kernel is stored as the vector of weights ``w_k = int_{k dx}^{(k+1) dx} omega(s) ds``
for ``k = 0 .. N_eta - 1``; ``w_0`` weighs the cell itself and higher ``k`` reach
further downstream.

Monotonicity is enforced as non-increasing (``w_{k+1} <= w_k``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import ConfigError


class DegenerateKernelError(ArithmeticError):
    """Raised when a raw kernel vector sums to zero and cannot be normalised."""


@dataclass(frozen=True, eq=False)
class DiscreteKernel:
    eta_m: float
    dx_m: float
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).ravel()
        if not (self.dx_m > 0 and len(w) >= 1 and math.isclose(len(w) * self.dx_m, self.eta_m)):
            raise ConfigError(f"{len(w)} weights of width {self.dx_m} m do not cover eta = {self.eta_m} m")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n_eta(self) -> int:
        return len(self.weights)

    @property
    def offsets_m(self) -> np.ndarray:
        return np.arange(self.n_eta) * self.dx_m

    def violations(self, tol: float = 0.0) -> list[str]:
        """Names of the discrete kernel constraints that fail (empty when valid)."""
        w = self.weights
        out = []
        if np.any(w < -tol):
            out.append("non-negative")
        if np.any(np.diff(w) > tol):
            out.append("non-increasing")
        if abs(w.sum() - 1.0) > max(tol, 1e-12):
            out.append("unit mass")
        return out

    def is_valid(self, tol: float = 0.0) -> bool:
        return not self.violations(tol)


def n_cells(eta_m: float, dx_m: float) -> int:
    ratio = eta_m / dx_m
    n = int(round(ratio))
    if n < 1 or not math.isclose(ratio, n, rel_tol=1e-9, abs_tol=1e-9):
        raise ConfigError(f"eta_m={eta_m} is not a positive multiple of dx_m={dx_m}")
    return n


def kernel_constant(eta_m: float, dx_m: float) -> DiscreteKernel:
    n = n_cells(eta_m, dx_m)
    return DiscreteKernel(eta_m, dx_m, np.full(n, 1.0 / n))


def kernel_linear(eta_m: float, dx_m: float) -> DiscreteKernel:
    """Cell integrals of ``omega(s) = 2 (eta - s) / eta^2``."""
    n = n_cells(eta_m, dx_m)
    # in units of dx the integral over cell k is ((n-k)^2 - (n-k-1)^2) / n^2 = (2(n-k) - 1) / n^2
    k = np.arange(n)
    return DiscreteKernel(eta_m, dx_m, (2.0 * (n - k) - 1.0) / (n * n))


def local_kernel(dx_m: float) -> DiscreteKernel:
    """Single-cell kernel; nonlocal density then equals local density."""
    return DiscreteKernel(dx_m, dx_m, np.ones(1))


def kernel_normalize(theta_omega, dx_m: float = 1.0) -> DiscreteKernel:
    theta = np.asarray(theta_omega, dtype=float).ravel()
    total = theta.sum()
    if total == 0.0 or not np.isfinite(total):
        raise DegenerateKernelError(f"kernel parameters sum to {total}; cannot normalise")
    return DiscreteKernel(len(theta) * dx_m, dx_m, theta / total)


def kernel_mass_fraction(kernel: DiscreteKernel, cutoff_m: float) -> float:
    """Total weight of the cells lying entirely inside ``[0, cutoff_m]``."""
    if cutoff_m > kernel.eta_m + 1e-9:
        raise ConfigError(f"cutoff {cutoff_m} m exceeds kernel length {kernel.eta_m} m")
    n_full = int(math.floor(cutoff_m / kernel.dx_m + 1e-9))
    return float(kernel.weights[:n_full].sum())


def make_kernel(kind: str, eta_m: float | None, dx_m: float) -> DiscreteKernel | None:
    """Kernel by name: ``local``/``none`` give ``None``, else ``constant`` or ``linear``."""
    kind = kind.lower()
    if kind in ("none", "local"):
        return None
    if eta_m is None:
        raise ConfigError(f"eta_m is required for the {kind!r} kernel")
    if kind == "constant":
        return kernel_constant(eta_m, dx_m)
    if kind == "linear":
        return kernel_linear(eta_m, dx_m)
    raise ConfigError(f"unknown kernel {kind!r}")


def write_kernel(kernel: DiscreteKernel, path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write("k,offset_m,weight\n")
        for k, (off, w) in enumerate(zip(kernel.offsets_m, kernel.weights)):
            fh.write(f"{k},{float(off)!r},{float(w)!r}\n")
    return path


def read_kernel(path, dx_m: float | None = None) -> DiscreteKernel:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    offsets = data[:, 1]
    if dx_m is not None:
        dx = float(dx_m)
    else:
        dx = float(offsets[1] - offsets[0]) if len(offsets) > 1 else 1.0
    return DiscreteKernel(len(offsets) * dx, dx, data[:, 2])
