"""Closed-form speed-density laws.

Greenshields is linear and clamped at zero beyond the jam density so that
every variant is non-negative and non-increasing on ``rho >= 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import ConfigError

VARIANTS = ("greenshields", "underwood", "drake")


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class FdParams:
    variant: str = "greenshields"
    v_f: float = 30.0
    rho_m: float = 0.2
    rho_c: float = 0.08

    def __post_init__(self):
        variant = self.variant.lower()
        if variant not in VARIANTS:
            raise ConfigError(f"unknown fundamental diagram {self.variant!r}; expected one of {VARIANTS}")
        object.__setattr__(self, "variant", variant)
        if not self.v_f > 0:
            raise ConfigError("v_f must be positive")
        if variant == "greenshields" and not self.rho_m > 0:
            raise ConfigError("rho_m must be positive")
        if variant != "greenshields" and not self.rho_c > 0:
            raise ConfigError("rho_c must be positive")


def _check(rho):
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise DomainError(f"negative density (min {rho.min()})")
    return rho


def _out(rho, value):
    return float(value) if np.ndim(rho) == 0 else value


def fd_eval(params: FdParams, rho):
    """Equilibrium speed V(rho) in m/s."""
    r = _check(rho)
    if params.variant == "greenshields":
        v = params.v_f * np.maximum(1.0 - r / params.rho_m, 0.0)
    elif params.variant == "underwood":
        v = params.v_f * np.exp(-r / params.rho_c)
    else:
        v = params.v_f * np.exp(-0.5 * (r / params.rho_c) ** 2)
    return _out(rho, v)


def fd_deriv(params: FdParams, rho):
    """dV/drho, analytic."""
    r = _check(rho)
    if params.variant == "greenshields":
        d = np.where(r < params.rho_m, -params.v_f / params.rho_m, 0.0)
    elif params.variant == "underwood":
        d = -params.v_f / params.rho_c * np.exp(-r / params.rho_c)
    else:
        u = r / params.rho_c
        d = -params.v_f * u / params.rho_c * np.exp(-0.5 * u * u)
    return _out(rho, d)


def fd_deriv2(params: FdParams, rho):
    """d2V/drho2; needed when a closed-form FD sits inside a differentiated residual."""
    r = _check(rho)
    if params.variant == "greenshields":
        d2 = np.zeros_like(r)
    elif params.variant == "underwood":
        d2 = params.v_f / params.rho_c**2 * np.exp(-r / params.rho_c)
    else:
        u = r / params.rho_c
        d2 = params.v_f / params.rho_c**2 * (u * u - 1.0) * np.exp(-0.5 * u * u)
    return _out(rho, d2)
