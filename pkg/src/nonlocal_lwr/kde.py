"""Gaussian kernel density reconstruction of density and speed fields.

Each trajectory record contributes a separable space-time Gaussian weight to
every grid cell. Space is periodic: the spatial kernel is summed over ring
images ``x + m L`` for ``|m| <= 3``. Records are weighted by their sampling
interval (trapezoid rule per vehicle) so that integrating the density over
space recovers the number of vehicles regardless of the GPS sampling rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import ConfigError, Field, RingGrid, TrajectorySet

N_IMAGES = 3
_CHUNK = 4096


class EmptyInputError(ConfigError):
    pass


@dataclass(frozen=True)
class KdeConfig:
    grid: RingGrid
    bandwidth_x_m: float = 10.0
    bandwidth_t_s: float = 2.0
    min_weight: float = 1e-6  # veh/m; below this a speed cell falls back to its nearest neighbour

    def __post_init__(self):
        if not (self.bandwidth_x_m > 0 and self.bandwidth_t_s > 0):
            raise ConfigError("KDE bandwidths must be positive")


def _gauss(d, sigma):
    return np.exp(-0.5 * (d / sigma) ** 2) / (sigma * np.sqrt(2.0 * np.pi))


def record_weights(traj: TrajectorySet) -> np.ndarray:
    """Time span (s) represented by each record: half the gap to each neighbour."""
    w = np.empty(len(traj))
    gaps_all = []
    singles = []
    for _, idx in traj.vehicles():
        t = traj.t[idx]
        if len(t) == 1:
            singles.append(idx)
            continue
        gaps = np.diff(t)
        gaps_all.append(gaps)
        wi = np.empty(len(t))
        wi[0] = 0.5 * gaps[0]
        wi[-1] = 0.5 * gaps[-1]
        wi[1:-1] = 0.5 * (gaps[:-1] + gaps[1:])
        w[idx] = wi
    fallback = float(np.median(np.concatenate(gaps_all))) if gaps_all else 1.0
    for idx in singles:
        w[idx] = fallback
    return w


def _accumulate(traj: TrajectorySet, cfg: KdeConfig, values=None):
    """``sum_r w_r G_t G_x`` and optionally ``sum_r w_r v_r G_t G_x`` over the grid."""
    if len(traj) == 0:
        raise EmptyInputError("trajectory set is empty")
    g = cfg.grid
    L = g.ring_length_m
    traj.validate(L)
    weights = record_weights(traj)
    tg, xg = g.t, g.x
    den = np.zeros(g.shape)
    num = np.zeros(g.shape) if values is not None else None
    images = np.arange(-N_IMAGES, N_IMAGES + 1) * L
    for start in range(0, len(traj), _CHUNK):
        sl = slice(start, start + _CHUNK)
        gt = _gauss(tg[:, None] - traj.t[None, sl], cfg.bandwidth_t_s) * weights[None, sl]
        dx = xg[None, :] - traj.x[sl, None]
        gx = np.zeros(dx.shape)
        for off in images:
            gx += _gauss(dx + off, cfg.bandwidth_x_m)
        den += gt @ gx
        if num is not None:
            num += (gt * values[None, sl]) @ gx
    return den, num


def reconstruct_density(traj: TrajectorySet, cfg: KdeConfig) -> Field:
    den, _ = _accumulate(traj, cfg)
    return Field(cfg.grid, den)


def _fill_nearest_periodic(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    out = values.copy()
    n_t, n_x = values.shape
    rows_valid = valid.any(axis=1)
    if not rows_valid.any():
        return np.full_like(values, np.nan)
    for i in range(n_t):
        if valid[i].all():
            continue
        src = i
        if not rows_valid[i]:
            good = np.flatnonzero(rows_valid)
            src = int(good[np.argmin(np.abs(good - i))])
        idx = np.flatnonzero(valid[src])
        ext = np.concatenate([idx - n_x, idx, idx + n_x])
        holes = np.flatnonzero(~valid[i])
        pos = np.searchsorted(ext, holes)
        left = ext[np.clip(pos - 1, 0, len(ext) - 1)]
        right = ext[np.clip(pos, 0, len(ext) - 1)]
        pick = np.where(holes - left <= right - holes, left, right) % n_x
        out[i, holes] = values[src, pick]
    return out


def reconstruct_speed(traj: TrajectorySet, cfg: KdeConfig) -> tuple[Field, np.ndarray]:
    """Nadaraya-Watson speed field and the boolean mask of fallback cells.

    Cells whose total kernel weight is below ``cfg.min_weight`` take the value
    of the nearest well-supported cell in the same time row.
    """
    den, num = _accumulate(traj, cfg, traj.v)
    valid = den >= cfg.min_weight
    with np.errstate(invalid="ignore", divide="ignore"):
        v = np.where(valid, num / np.where(valid, den, 1.0), 0.0)
    if not valid.all():
        v = _fill_nearest_periodic(v, valid)
    return Field(cfg.grid, v), ~valid


def _interp_periodic(row: np.ndarray, x: np.ndarray, grid: RingGrid) -> np.ndarray:
    """Linear interpolation between cell centres, wrapped on the ring."""
    s = x / grid.dx_m - 0.5
    j0 = np.floor(s).astype(np.int64)
    frac = s - j0
    return (1.0 - frac) * row[j0 % grid.n_x] + frac * row[(j0 + 1) % grid.n_x]


def synth_trajectories(fld: Field, speed: Field, n_vehicles: int, substeps: int = 10,
                       placement: str = "equal", x0=None) -> TrajectorySet:
    """Virtual probe vehicles advected by ``dx/dt = v(t, x)``.

    Vehicles start at equal headways (``placement="equal"``) or at the
    quantiles of the initial density (``"density"``), unless explicit start
    positions ``x0`` are given. One record per vehicle
    is emitted at every grid time; the speed field is interpolated linearly
    in time and space between grid samples.
    """
    g = speed.grid
    if n_vehicles < 1:
        raise ConfigError("need at least one vehicle")
    L = g.ring_length_m
    if x0 is not None:
        x = np.mod(np.asarray(x0, dtype=float), L)
        if x.shape != (n_vehicles,):
            raise ConfigError(f"x0 has shape {x.shape}, expected ({n_vehicles},)")
    elif placement == "equal":
        x = np.arange(n_vehicles) * (L / n_vehicles)
    elif placement == "density":
        cum = np.concatenate([[0.0], np.cumsum(fld.values[0]) * g.dx_m])
        edges = np.arange(g.n_x + 1) * g.dx_m
        x = np.interp((np.arange(n_vehicles) + 0.5) / n_vehicles * cum[-1], cum, edges)
    else:
        raise ConfigError(f"unknown placement {placement!r}")
    h = g.dt_s / substeps
    V = speed.values
    ids, ts, xs, vs = [], [], [], []
    for i in range(g.n_t):
        ids.append(np.arange(n_vehicles))
        ts.append(np.full(n_vehicles, g.t[i]))
        xs.append(x.copy())
        vs.append(_interp_periodic(V[i], x, g))
        if i == g.n_t - 1:
            break
        for s in range(substeps):
            a = s / substeps
            row = V[i] if a == 0.0 else (1.0 - a) * V[i] + a * V[i + 1]
            x = np.mod(x + h * _interp_periodic(row, x, g), L)
    order = np.lexsort((np.concatenate(ts), np.concatenate(ids)))
    cat = lambda parts: np.concatenate(parts)[order]
    return TrajectorySet(cat(ids), cat(ts), cat(xs), cat(vs))
