"""Experiment configuration: a sectioned key=value file with units in key names.

Example::

    [grid]
    ring_length_m = 800
    dx_m = 1
    dt_s = 1
    horizon_s = 200

    [training]
    seed = 7

Every section is optional except that ``training.seed`` must be given (either
in the file or on the command line). Unknown keys are rejected so that typos
do not silently fall back to defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .fundamental import VARIANTS, FdParams
from .grid import ConfigError, RingGrid
from .kernels import n_cells


@dataclass(frozen=True)
class GridSection:
    ring_length_m: float = 800.0
    dx_m: float = 1.0
    dt_s: float = 1.0
    horizon_s: float = 200.0


@dataclass(frozen=True)
class SolverSection:
    fd: str = "greenshields"
    v_f_mps: float = 30.0
    rho_m_vpm: float = 0.2
    rho_c_vpm: float = 0.08
    kernel: str = "linear"  # none | constant | linear
    eta_m: Optional[float] = 40.0
    cfl_safety: float = 0.9
    substeps: int = 0  # 0: smallest count meeting the CFL bound
    ic_mean_vpm: float = 0.05
    ic_amplitude_vpm: float = 0.02


@dataclass(frozen=True)
class KdeSection:
    bandwidth_x_m: float = 10.0
    bandwidth_t_s: float = 2.0
    n_vehicles: int = 40


@dataclass(frozen=True)
class TrainingSection:
    seed: Optional[int] = None
    kernel: str = "learned"  # learned | constant | linear | local
    eta_m: Optional[float] = 40.0
    fd_model: str = "learned"  # learned | closed
    density_layers: int = 3
    density_width: int = 32
    fd_layers: int = 2
    fd_width: int = 32
    time_scale_s: float = 0.0  # 0: use the horizon
    rho_scale_vpm: float = 0.2
    v_scale_mps: float = 30.0
    n_collocation: int = 512
    n_detectors: int = 5
    # data weight below the physics: chosen by an alpha sweep on the default twin
    alpha_initial: float = 0.1
    alpha_detector: float = 0.1
    p_omega_1: float = 1e4
    p_omega_2: float = 1e4
    p_v_1: float = 1e4
    p_v_2: float = 1e4
    rho_max_vpm: float = 0.2
    n_rho: int = 100
    adam_iters: int = 5000
    lbfgs_iters: int = 500
    lr: float = 1e-3
    lbfgs_history: int = 20
    checkpoint_every: int = 0


@dataclass(frozen=True)
class PathsSection:
    truth_rho: str = "truth_rho.csv"
    truth_v: str = "truth_v.csv"
    trajectories: str = "trajectories.csv"
    checkpoint: str = "checkpoint.bin"
    report_dir: str = "report"


@dataclass(frozen=True)
class ExperimentConfig:
    grid: GridSection = field(default_factory=GridSection)
    solver: SolverSection = field(default_factory=SolverSection)
    kde: KdeSection = field(default_factory=KdeSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def __post_init__(self):
        validate(self)

    @property
    def seed(self) -> int:
        return int(self.training.seed)

    def ring_grid(self) -> RingGrid:
        g = self.grid
        return RingGrid.from_lengths(g.ring_length_m, g.dx_m, g.horizon_s, g.dt_s)

    def fd_params(self) -> FdParams:
        s = self.solver
        return FdParams(s.fd, s.v_f_mps, s.rho_m_vpm, s.rho_c_vpm)

    def replace(self, section: str, **changes) -> "ExperimentConfig":
        new = dataclasses.replace(getattr(self, section), **changes)
        return dataclasses.replace(self, **{section: new})


_SECTIONS = {f.name: f.type for f in fields(ExperimentConfig)}
_SECTION_TYPES = {"grid": GridSection, "solver": SolverSection, "kde": KdeSection,
                  "training": TrainingSection, "paths": PathsSection}


def _field_types(cls) -> dict:
    hints = {"float": float, "int": int, "str": str,
             "Optional[float]": float, "Optional[int]": int}
    return {f.name: hints[f.type] for f in fields(cls)}


def validate(cfg: ExperimentConfig) -> None:
    g, s, t = cfg.grid, cfg.solver, cfg.training
    for name in ("ring_length_m", "dx_m", "dt_s"):
        if not getattr(g, name) > 0:
            raise ConfigError(f"grid.{name} must be positive")
    if g.horizon_s < 0:
        raise ConfigError("grid.horizon_s must be non-negative")
    if s.fd not in VARIANTS:
        raise ConfigError(f"solver.fd must be one of {', '.join(VARIANTS)}")
    if s.kernel not in ("none", "local", "constant", "linear"):
        raise ConfigError("solver.kernel must be none, constant or linear")
    if s.kernel in ("constant", "linear"):
        if s.eta_m is None:
            raise ConfigError(f"solver.eta_m is required for the {s.kernel} kernel")
        n_cells(s.eta_m, g.dx_m)
    if not 0 < s.cfl_safety <= 1:
        raise ConfigError("solver.cfl_safety must lie in (0, 1]")
    if s.substeps < 0:
        raise ConfigError("solver.substeps must be >= 0")
    if t.kernel not in ("learned", "constant", "linear", "local"):
        raise ConfigError("training.kernel must be learned, constant, linear or local")
    if t.kernel != "local":
        if t.eta_m is None:
            raise ConfigError(f"training.eta_m is required for the {t.kernel} kernel")
        n_cells(t.eta_m, g.dx_m)
    if t.fd_model not in ("learned", "closed"):
        raise ConfigError("training.fd_model must be learned or closed")
    if t.n_detectors < 1:
        raise ConfigError("training.n_detectors must be >= 1")
    if t.n_collocation < 1:
        raise ConfigError("training.n_collocation must be >= 1")
    if t.adam_iters < 0 or t.lbfgs_iters < 0:
        raise ConfigError("training iteration counts must be >= 0")
    if t.seed is not None and not 0 <= t.seed < 2**64:
        raise ConfigError("training.seed must be an unsigned 64-bit integer")
    if cfg.kde.n_vehicles < 1:
        raise ConfigError("kde.n_vehicles must be >= 1")


def _parse_value(section: str, key: str, raw: str, typ):
    raw = raw.strip()
    if raw.lower() in ("", "none"):
        return None
    try:
        if typ is int:
            return int(raw, 0) if raw.lower().startswith("0x") else int(raw)
        if typ is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {typ.__name__}") from None
    return raw


def from_mapping(data: dict) -> ExperimentConfig:
    """Build a config from ``{section: {key: str}}``, rejecting unknown names."""
    sections = {}
    for name, values in data.items():
        if name == "DEFAULT":
            continue
        if name not in _SECTION_TYPES:
            raise ConfigError(f"unknown config section [{name}]")
        cls = _SECTION_TYPES[name]
        types = _field_types(cls)
        kw = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown key {name}.{key}")
            val = _parse_value(name, key, raw, types[key])
            if val is None and key not in ("eta_m", "seed"):
                raise ConfigError(f"{name}.{key} has no value")
            kw[key] = val
        sections[name] = cls(**kw)
    return ExperimentConfig(**sections)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_mapping({s: dict(parser[s]) for s in parser.sections()})


def require_seed(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.training.seed is None:
        raise ConfigError("training.seed is required (set it in the config or pass --seed)")
    return cfg


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    """Effective config, every key written out; parses back to an equal config."""
    lines = []
    for name in _SECTION_TYPES:
        lines.append(f"[{name}]")
        sec = getattr(cfg, name)
        for f in fields(sec):
            lines.append(f"{f.name} = {_format(getattr(sec, f.name))}")
        lines.append("")
    return "\n".join(lines)


def write_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(dump_config(cfg))
    return path
