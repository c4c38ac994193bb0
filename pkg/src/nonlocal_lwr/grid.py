"""Periodic space-time grid, fields, trajectories and detector measurements.

Arrays are indexed ``[t, x]`` everywhere. Field values live at cell centres
``x_j = (j + 1/2) dx`` and at time instants ``t_i = i dt``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration or input data."""


@dataclass(frozen=True)
class RingGrid:
    ring_length_m: float
    dt_s: float
    dx_m: float
    n_t: int
    n_x: int

    def __post_init__(self):
        if not (self.dt_s > 0 and self.dx_m > 0):
            raise ConfigError("dt_s and dx_m must be positive")
        if self.n_t < 2 or self.n_x < 2:
            raise ConfigError("grid needs n_t >= 2 and n_x >= 2")
        if not math.isclose(self.n_x * self.dx_m, self.ring_length_m, rel_tol=1e-12):
            raise ConfigError(
                f"n_x * dx_m = {self.n_x * self.dx_m} does not equal ring_length_m = {self.ring_length_m}"
            )

    @classmethod
    def from_lengths(cls, ring_length_m: float, dx_m: float, horizon_s: float, dt_s: float) -> "RingGrid":
        """Grid covering ``[0, horizon_s]`` inclusive on a ring of the given length."""
        n_x = int(round(ring_length_m / dx_m))
        n_t = int(round(horizon_s / dt_s)) + 1
        if not math.isclose(n_x * dx_m, ring_length_m, rel_tol=1e-12):
            raise ConfigError(f"ring_length_m={ring_length_m} is not a multiple of dx_m={dx_m}")
        if not math.isclose((n_t - 1) * dt_s, horizon_s, rel_tol=1e-12):
            raise ConfigError(f"horizon_s={horizon_s} is not a multiple of dt_s={dt_s}")
        return cls(float(ring_length_m), float(dt_s), float(dx_m), n_t, n_x)

    @property
    def horizon_s(self) -> float:
        return (self.n_t - 1) * self.dt_s

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.n_t) * self.dt_s

    @property
    def x(self) -> np.ndarray:
        return (np.arange(self.n_x) + 0.5) * self.dx_m

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_t, self.n_x)

    def cell_of(self, x_m: float) -> int:
        """Index of the cell containing position ``x_m`` (wrapped onto the ring)."""
        return wrap_index(int(math.floor(x_m / self.dx_m)), self)


def wrap_index(j, grid: RingGrid):
    """Periodic cell index; works on ints and integer arrays."""
    return j % grid.n_x


@dataclass(frozen=True, eq=False)
class Field:
    grid: RingGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise ConfigError(f"field shape {values.shape} does not match grid {self.grid.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def at(self, i: int, j: int) -> float:
        return float(self.values[i, wrap_index(j, self.grid)])

    def is_density(self) -> bool:
        return bool(np.all(self.values >= 0))


@dataclass(frozen=True)
class TrajectorySet:
    vehicle_id: np.ndarray
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        arrays = [np.asarray(a) for a in (self.vehicle_id, self.t, self.x, self.v)]
        n = len(arrays[0])
        if any(len(a) != n for a in arrays):
            raise ConfigError("trajectory columns differ in length")
        for name, a in zip(("vehicle_id", "t", "x", "v"), arrays):
            a = a.astype(np.int64 if name == "vehicle_id" else float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def __len__(self) -> int:
        return len(self.t)

    def validate(self, ring_length_m: float) -> None:
        """Check positions are on the ring and per-vehicle timestamps strictly increase."""
        if np.any((self.x < 0) | (self.x >= ring_length_m)):
            bad = int(np.flatnonzero((self.x < 0) | (self.x >= ring_length_m))[0])
            raise ConfigError(f"record {bad}: position {self.x[bad]} outside [0, {ring_length_m})")
        for vid in np.unique(self.vehicle_id):
            tv = self.t[self.vehicle_id == vid]
            if np.any(np.diff(tv) <= 0):
                raise ConfigError(f"vehicle {vid}: timestamps are not strictly increasing")

    def vehicles(self) -> Iterable[tuple[int, np.ndarray]]:
        for vid in np.unique(self.vehicle_id):
            yield int(vid), np.flatnonzero(self.vehicle_id == vid)


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    initial_profile: np.ndarray
    detector_positions: tuple[int, ...]
    detector_series: np.ndarray  # shape (n_detectors, n_t)

    @property
    def n_detectors(self) -> int:
        return len(self.detector_positions)


def evenly_spaced_detectors(n_detectors: int, grid: RingGrid) -> tuple[int, ...]:
    """``n_detectors`` cells spread evenly around the ring, the first at x = 0."""
    if n_detectors < 1 or n_detectors > grid.n_x:
        raise ConfigError(f"cannot place {n_detectors} detectors on {grid.n_x} cells")
    return tuple(int(j * grid.n_x // n_detectors) for j in range(n_detectors))


def subsample_measurements(fld: Field, detector_positions: Sequence[int]) -> MeasurementSet:
    positions = tuple(int(p) for p in detector_positions)
    if len(set(positions)) != len(positions):
        raise ConfigError(f"duplicate detector positions in {positions}")
    for p in positions:
        if not 0 <= p < fld.grid.n_x:
            raise ConfigError(f"detector position {p} outside [0, {fld.grid.n_x})")
    init = fld.values[0].copy()
    series = fld.values[:, list(positions)].T.copy()
    return MeasurementSet(init, positions, series)


# ---------------------------------------------------------------------------
# delimited text formats

def _fmt(v: float) -> str:
    return repr(float(v))


def write_field(fld: Field, path) -> Path:
    path = Path(path)
    g = fld.grid
    with open(path, "w", newline="") as fh:
        fh.write(f"# ring_length_m={_fmt(g.ring_length_m)} dt_s={_fmt(g.dt_s)} dx_m={_fmt(g.dx_m)} "
                 f"n_t={g.n_t} n_x={g.n_x}\n")
        fh.write("t,x,value\n")
        ts, xs = g.t, g.x
        for i in range(g.n_t):
            ti = _fmt(ts[i])
            row = fld.values[i]
            fh.write("".join(f"{ti},{_fmt(xs[j])},{_fmt(row[j])}\n" for j in range(g.n_x)))
    return path


def read_field(path) -> Field:
    path = Path(path)
    with open(path) as fh:
        meta_line = fh.readline()
        if not meta_line.startswith("#"):
            raise ConfigError(f"{path}: missing grid header line")
        meta = dict(kv.split("=") for kv in meta_line[1:].split())
        grid = RingGrid(float(meta["ring_length_m"]), float(meta["dt_s"]), float(meta["dx_m"]),
                        int(meta["n_t"]), int(meta["n_x"]))
        header = fh.readline().strip()
        if header != "t,x,value":
            raise ConfigError(f"{path}: expected header 't,x,value', got {header!r}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape[0] != grid.n_t * grid.n_x:
        raise ConfigError(f"{path}: expected {grid.n_t * grid.n_x} rows, found {data.shape[0]}")
    return Field(grid, data[:, 2].reshape(grid.shape))


def write_trajectories(traj: TrajectorySet, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write("vehicle_id,t,x,v\n")
        for k in range(len(traj)):
            fh.write(f"{int(traj.vehicle_id[k])},{_fmt(traj.t[k])},{_fmt(traj.x[k])},{_fmt(traj.v[k])}\n")
    return path


def read_trajectories(path) -> TrajectorySet:
    """Parse a trajectory file; malformed rows raise ``ConfigError`` naming the line."""
    path = Path(path)
    ids, ts, xs, vs = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ConfigError(f"{path}: no records")
        if [h.strip() for h in header] != ["vehicle_id", "t", "x", "v"]:
            raise ConfigError(f"{path}: line 1: expected header vehicle_id,t,x,v")
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ConfigError(f"{path}: line {reader.line_num}: expected 4 columns, got {len(row)}")
            try:
                ids.append(int(row[0]))
                ts.append(float(row[1]))
                xs.append(float(row[2]))
                vs.append(float(row[3]))
            except ValueError as exc:
                raise ConfigError(f"{path}: line {reader.line_num}: {exc}") from None
    if not ids:
        raise ConfigError(f"{path}: no records")
    return TrajectorySet(np.array(ids), np.array(ts), np.array(xs), np.array(vs))


@dataclass
class LossTrace:
    """Per-iteration loss components, appended during training."""
    rows: list = field(default_factory=list)

    HEADER = "iter,loss_total,loss_data,loss_phy_d,loss_phy_s"

    def append(self, it: int, total: float, data: float, phy_d: float, phy_s: float) -> None:
        self.rows.append((int(it), float(total), float(data), float(phy_d), float(phy_s)))

    def write(self, path) -> Path:
        path = Path(path)
        with open(path, "w") as fh:
            fh.write(self.HEADER + "\n")
            for r in self.rows:
                fh.write(f"{r[0]}," + ",".join(_fmt(v) for v in r[1:]) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "LossTrace":
        trace = cls()
        with open(path) as fh:
            next(fh)
            for line in fh:
                parts = line.strip().split(",")
                trace.append(int(parts[0]), *map(float, parts[1:]))
        return trace
