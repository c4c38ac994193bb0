"""Error metrics, report assembly and report export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .grid import ConfigError, Field, LossTrace, write_field
from .kernels import DiscreteKernel, kernel_mass_fraction, write_kernel
from .solver import nonlocal_density


class UndefinedMetricError(ArithmeticError):
    pass


def _relative_rmse(est: np.ndarray, ref: np.ndarray, what: str) -> float:
    denom = np.sqrt(np.sum(ref**2))
    if denom == 0.0:
        raise UndefinedMetricError(f"{what} truth is identically zero")
    return float(np.sqrt(np.sum((est - ref) ** 2)) / denom * 100.0)


def _same_grid(a: Field, b: Field) -> None:
    if a.grid != b.grid:
        raise ConfigError(f"grids differ: {a.grid} vs {b.grid}")


def e_rho(estimate: Field, truth: Field) -> float:
    """Relative RMSE of density over the full grid, in percent."""
    _same_grid(estimate, truth)
    return _relative_rmse(estimate.values, truth.values, "density")


def predicted_speed(speed_fn: Callable[[np.ndarray], np.ndarray], kernel: Optional[DiscreteKernel],
                    rho_field: Field) -> np.ndarray:
    """``V(rho_eta)`` on every cell; ``kernel=None`` means local density."""
    vals = rho_field.values
    if kernel is not None:
        vals = np.stack([nonlocal_density(row, kernel) for row in vals])
    return np.asarray(speed_fn(vals.ravel())).reshape(vals.shape)


def e_v(speed_fn: Callable[[np.ndarray], np.ndarray], kernel: Optional[DiscreteKernel],
        rho_field: Field, v_field: Field) -> float:
    """Relative RMSE of ``V(rho_eta)`` against a speed field, in percent."""
    _same_grid(rho_field, v_field)
    return _relative_rmse(predicted_speed(speed_fn, kernel, rho_field), v_field.values, "speed")


@dataclass
class EvalReport:
    e_rho_pct: float
    e_v_pct: Optional[float]
    kernel_snapshot: DiscreteKernel
    fd_curve: np.ndarray  # (N_rho + 1, 2): rho, v_hat
    mass_fraction_4m: float
    mass_fraction_10m: float

    def summary(self) -> dict:
        return {
            "e_rho_pct": self.e_rho_pct,
            "e_v_pct": self.e_v_pct,
            "eta_m": self.kernel_snapshot.eta_m,
            "n_eta": self.kernel_snapshot.n_eta,
            "mass_fraction_4m": self.mass_fraction_4m,
            "mass_fraction_10m": self.mass_fraction_10m,
        }


def fd_curve(speed_fn, rho_max: float, n_rho: int = 100) -> np.ndarray:
    rho = np.arange(n_rho + 1) * (rho_max / n_rho)
    return np.stack([rho, np.asarray(speed_fn(rho), dtype=float)], axis=1)


def make_report(estimate: Field, truth: Optional[Field], kernel: DiscreteKernel, speed_fn,
                rho_max: float, n_rho: int = 100, v_truth: Optional[Field] = None) -> EvalReport:
    e_r = e_rho(estimate, truth) if truth is not None else float("nan")
    e_vv = e_v(speed_fn, kernel, estimate, v_truth) if v_truth is not None else None
    cut = lambda c: kernel_mass_fraction(kernel, min(c, kernel.eta_m))
    return EvalReport(e_r, e_vv, kernel, fd_curve(speed_fn, rho_max, n_rho), cut(4.0), cut(10.0))


# ---------------------------------------------------------------------------
# export

def write_summary(values: dict, path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for k, v in values.items():
            fh.write(f"{k}={'none' if v is None else repr(v)}\n")
    return path


def read_summary(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, v = line.split("=", 1)
            if v == "none":
                out[k] = None
            elif v.lstrip("-").isdigit():
                out[k] = int(v)
            else:
                try:
                    out[k] = float(v)
                except ValueError:
                    out[k] = v
    return out


def write_fd_curve(curve: np.ndarray, path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write("rho,v_hat\n")
        for r, v in curve:
            fh.write(f"{float(r)!r},{float(v)!r}\n")
    return path


def read_fd_curve(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def export_report(report: EvalReport, out_dir, field_est: Optional[Field] = None,
                  trace: Optional[LossTrace] = None, truth: Optional[Field] = None,
                  figures: bool = True) -> dict:
    """Write the report files (and PNG figures) into ``out_dir``; returns name -> path."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    paths = {
        "summary": write_summary(report.summary(), out / "summary.txt"),
        "kernel": write_kernel(report.kernel_snapshot, out / "kernel.csv"),
        "fd_curve": write_fd_curve(report.fd_curve, out / "fd_curve.csv"),
    }
    if field_est is not None:
        paths["field_est"] = write_field(field_est, out / "field_est.csv")
    if trace is not None:
        paths["loss_trace"] = trace.write(out / "loss_trace.csv")
    if figures:
        from . import plots

        paths.update(plots.report_figures(report, out, field_est=field_est, trace=trace, truth=truth))
    return paths
