"""Training objective: data misfit, nonlocal LWR residual, constraint penalties.

All gradients are assembled by hand from the network engine in :mod:`.mlp`.
Three parameter blocks are involved: the density network (``theta``), the
speed-density network (``theta_v``) and the raw kernel vector (``theta_omega``,
normalised to unit sum before use).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import mlp
from .fundamental import FdParams, fd_deriv, fd_deriv2, fd_eval
from .grid import ConfigError, MeasurementSet, RingGrid
from .kernels import DegenerateKernelError, DiscreteKernel


@dataclass(frozen=True)
class LossWeights:
    alpha_initial: float = 1.0
    alpha_detector: tuple = (1.0,)
    p_omega_1: float = 1e4
    p_omega_2: float = 1e4
    p_v_1: float = 1e4
    p_v_2: float = 1e4

    def __post_init__(self):
        a = self.alpha_detector
        a = (float(a),) if np.isscalar(a) else tuple(float(v) for v in a)
        object.__setattr__(self, "alpha_detector", a)
        vals = (self.alpha_initial, *a, self.p_omega_1, self.p_omega_2, self.p_v_1, self.p_v_2)
        if any(not v > 0 for v in vals):
            raise ConfigError("all loss weights must be positive")

    def detector_weights(self, n_detectors: int) -> np.ndarray:
        a = self.alpha_detector
        if len(a) == 1:
            return np.full(n_detectors, a[0])
        if len(a) != n_detectors:
            raise ConfigError(f"{len(a)} detector weights for {n_detectors} detectors")
        return np.asarray(a)


@dataclass(frozen=True, eq=False)
class CollocationSet:
    points: np.ndarray  # (N_P, 2) integer (t index, x index)
    rng_seed: int

    @classmethod
    def sample(cls, grid: RingGrid, n_points: int, rng_seed: int) -> "CollocationSet":
        """Uniform draw without replacement from the grid cells."""
        total = grid.n_t * grid.n_x
        if not 1 <= n_points <= total:
            raise ConfigError(f"cannot draw {n_points} collocation points from {total} cells")
        rng = np.random.default_rng(rng_seed)
        flat = np.sort(rng.choice(total, size=n_points, replace=False))
        return cls(np.stack([flat // grid.n_x, flat % grid.n_x], axis=1), rng_seed)

    def __len__(self) -> int:
        return len(self.points)


# ---------------------------------------------------------------------------
# models wrapping the networks

class DensityModel:
    """``rho(t, x) = rho_scale * softplus(net(t / T, sin(2 pi x / L), cos(2 pi x / L)))``.

    ``T`` is the time scale, by default the horizon. The encoding makes the
    field exactly periodic in ``x``; spatial derivatives are chained through it.
    """

    trainable = True

    def __init__(self, spec: mlp.MlpSpec, horizon_s: float, ring_length_m: float, rho_scale: float = 0.2,
                 time_scale_s: Optional[float] = None):
        if spec.input_dim != 3 or spec.output_dim != 1:
            raise ConfigError("density network must map 3 encoded inputs to 1 output")
        self.spec = spec
        self.horizon_s = float(horizon_s if time_scale_s is None else time_scale_s)
        self.ring_length_m = float(ring_length_m)
        self.rho_scale = float(rho_scale)

    @property
    def n_params(self) -> int:
        return self.spec.n_params

    def encode(self, t, x):
        t = np.asarray(t, dtype=float).ravel()
        x = np.asarray(x, dtype=float).ravel()
        k = 2.0 * np.pi / self.ring_length_m
        s, c = np.sin(k * x), np.cos(k * x)
        X = np.stack([t / self.horizon_s, s, c], axis=1)
        ut = np.array([1.0 / self.horizon_s, 0.0, 0.0])
        ux = np.stack([np.zeros_like(x), k * c, -k * s], axis=1)
        return X, ut, ux

    def evaluate(self, params, t, x, d_t=False, d_x=False):
        X, ut, ux = self.encode(t, x)
        return self.evaluate_encoded(params, X, ut if d_t else None, ux if d_x else None)

    def evaluate_encoded(self, params, X, ut=None, ux=None):
        """Returns ``(rho, rho_t, rho_x, tape)``; derivatives are ``None`` unless requested."""
        tans = [u for u in (ut, ux) if u is not None]
        Y, dY, tape = mlp.forward_tangent(self.spec, params, X, tans)
        s = self.rho_scale
        it = iter(dY)
        rho_t = s * next(it)[:, 0] if ut is not None else None
        rho_x = s * next(it)[:, 0] if ux is not None else None
        tape_info = (tape, ut is not None, ux is not None)
        return s * Y[:, 0], rho_t, rho_x, tape_info

    def backward(self, tape_info, g_rho=None, g_rho_t=None, g_rho_x=None) -> np.ndarray:
        tape, has_t, has_x = tape_info
        s = self.rho_scale
        col = lambda g: None if g is None else (s * np.asarray(g))[:, None]
        gdots = []
        if has_t:
            gdots.append(col(g_rho_t))
        if has_x:
            gdots.append(col(g_rho_x))
        gp, _, _ = mlp.backward(tape, col(g_rho), gdots)
        return gp


class LearnedFd:
    """``V(rho) = v_scale * net(rho / rho_scale)``; identity output, penalties keep it physical."""

    trainable = True

    def __init__(self, spec: mlp.MlpSpec, rho_scale: float = 0.2, v_scale: float = 30.0):
        if spec.input_dim != 1 or spec.output_dim != 1:
            raise ConfigError("speed network must be scalar to scalar")
        self.spec = spec
        self.rho_scale = float(rho_scale)
        self.v_scale = float(v_scale)

    @property
    def n_params(self) -> int:
        return self.spec.n_params

    def evaluate(self, params, rho):
        """Returns ``(V, dV/drho, tape)``."""
        r = np.asarray(rho, dtype=float).ravel()
        Y, dY, tape = mlp.forward_tangent(self.spec, params, (r / self.rho_scale)[:, None],
                                          [np.full((len(r), 1), 1.0 / self.rho_scale)])
        return self.v_scale * Y[:, 0], self.v_scale * dY[0][:, 0], tape

    def backward(self, tape, g_v=None, g_dv=None):
        """Returns ``(g_params, g_rho)``."""
        c = lambda g: None if g is None else (self.v_scale * np.asarray(g))[:, None]
        gp, gx, _ = mlp.backward(tape, c(g_v), [c(g_dv)])
        return gp, gx[:, 0] / self.rho_scale

    def net(self, params) -> mlp.MlpNet:
        return mlp.MlpNet(self.spec, params)


class ClosedFormFd:
    """Fixed parametric speed-density law with the same interface as :class:`LearnedFd`."""

    trainable = False
    n_params = 0

    def __init__(self, params: FdParams):
        self.params = params

    def evaluate(self, params, rho):
        r = np.maximum(np.asarray(rho, dtype=float).ravel(), 0.0)
        return fd_eval(self.params, r), fd_deriv(self.params, r), r

    def backward(self, tape, g_v=None, g_dv=None):
        r = tape
        g = np.zeros_like(r)
        if g_v is not None:
            g = g + g_v * fd_deriv(self.params, r)
        if g_dv is not None:
            g = g + g_dv * fd_deriv2(self.params, r)
        return np.zeros(0), g


FdModel = Union[LearnedFd, ClosedFormFd]


def normalized_kernel(theta_omega) -> np.ndarray:
    theta = np.asarray(theta_omega, dtype=float)
    total = theta.sum()
    if total == 0.0 or not np.isfinite(total):
        raise DegenerateKernelError(f"kernel parameters sum to {total}; training cannot continue")
    return theta / total


def _normalize_backward(theta_omega, g_w):
    total = theta_omega.sum()
    w = theta_omega / total
    return (g_w - np.dot(g_w, w)) / total


# ---------------------------------------------------------------------------
# data loss

def _data_points(grid: RingGrid, meas: MeasurementSet):
    x0 = grid.x
    t_init = np.zeros(grid.n_x)
    det_t = np.tile(grid.t, meas.n_detectors)
    det_x = np.repeat(grid.x[list(meas.detector_positions)], grid.n_t)
    return (t_init, x0), (det_t, det_x)


def _data_term(density, theta, grid, meas, weights, encoded=None):
    if encoded is None:
        (ti, xi), (td, xd) = _data_points(grid, meas)
        X = np.concatenate([density.encode(ti, xi)[0], density.encode(td, xd)[0]])
    else:
        X = encoded
    rho, _, _, tape = density.evaluate_encoded(theta, X)
    n_x, n_t, n_l = grid.n_x, grid.n_t, meas.n_detectors
    r_init = rho[:n_x] - meas.initial_profile
    r_det = rho[n_x:].reshape(n_l, n_t) - meas.detector_series
    alpha = weights.detector_weights(n_l)
    l_init = np.mean(r_init**2)
    l_det = np.mean(r_det**2, axis=1)
    value = weights.alpha_initial * l_init + float(np.dot(alpha, l_det))
    g = np.concatenate([2.0 * weights.alpha_initial * r_init / n_x,
                        (2.0 * alpha[:, None] * r_det / n_t).ravel()])
    return value, (tape, g)


def loss_data(density: DensityModel, theta, grid: RingGrid, meas: MeasurementSet, weights: LossWeights) -> float:
    """``alpha_init * mean initial misfit^2 + sum_i alpha_i * mean detector_i misfit^2``."""
    return _data_term(density, theta, grid, meas, weights)[0]


# ---------------------------------------------------------------------------
# physics residual

class _ResidualPoints:
    """Encodings for a batch of residual points and their downstream neighbours."""

    def __init__(self, density, grid: RingGrid, t_idx, x_idx, n_eta: int):
        t_idx = np.asarray(t_idx, dtype=np.int64)
        x_idx = np.asarray(x_idx, dtype=np.int64)
        self.n_points = len(t_idx)
        self.n_eta = n_eta
        shifted = (x_idx[:, None] + np.arange(n_eta)[None, :]) % grid.n_x
        t = grid.t[t_idx]
        xs = grid.x[shifted].ravel()
        ts = np.repeat(t, n_eta)
        self.X_shift, _, self.ux_shift = density.encode(ts, xs)
        self.X_center, self.ut_center, _ = density.encode(t, grid.x[x_idx])


def _residual_core(density, theta, fd, theta_v, w, pts: _ResidualPoints, want_grad=False):
    P, K = pts.n_points, pts.n_eta
    rho, _, rho_x, tape_s = density.evaluate_encoded(theta, pts.X_shift, None, pts.ux_shift)
    _, rho_t, _, tape_c = density.evaluate_encoded(theta, pts.X_center, pts.ut_center, None)
    rho = rho.reshape(P, K)
    rho_x = rho_x.reshape(P, K)
    rho_eta = rho @ w
    rho_eta_x = rho_x @ w
    v, dv, tape_v = fd.evaluate(theta_v, rho_eta)
    r0, r0x = rho[:, 0], rho_x[:, 0]
    f = rho_t + r0x * v + r0 * dv * rho_eta_x
    if not want_grad:
        return f, None

    def pullback(g_f):
        g_rho = np.zeros((P, K))
        g_rho_x = np.zeros((P, K))
        g_rho[:, 0] = g_f * dv * rho_eta_x
        g_rho_x[:, 0] = g_f * v
        g_v = g_f * r0x
        g_dv = g_f * r0 * rho_eta_x
        g_eta_x = g_f * r0 * dv
        g_theta_v, g_eta = fd.backward(tape_v, g_v, g_dv)
        g_rho += g_eta[:, None] * w[None, :]
        g_rho_x += g_eta_x[:, None] * w[None, :]
        g_w = rho.T @ g_eta + rho_x.T @ g_eta_x
        g_theta = density.backward(tape_s, g_rho.ravel(), None, g_rho_x.ravel())
        g_theta = g_theta + density.backward(tape_c, None, g_f, None)
        return g_theta, g_theta_v, g_w

    return f, pullback


def residual(density, theta, fd: FdModel, theta_v, kernel_weights, grid: RingGrid, t_idx, x_idx) -> np.ndarray:
    """Nonlocal LWR residual at grid points ``(t_idx, x_idx)``.

    ``f = rho_t + rho_x V(rho_eta) + rho V'(rho_eta) d/dx rho_eta`` where the
    nonlocal density and its derivative are the kernel-weighted sums of the
    network field at downstream cells, wrapped on the ring.
    """
    w = np.asarray(kernel_weights, dtype=float)
    if len(w) > grid.n_x:
        raise ConfigError(f"kernel with {len(w)} cells longer than the ring ({grid.n_x} cells)")
    t_idx = np.atleast_1d(t_idx)
    x_idx = np.atleast_1d(x_idx)
    pts = _ResidualPoints(density, grid, t_idx, x_idx, len(w))
    return _residual_core(density, theta, fd, theta_v, w, pts)[0]


def loss_phys_dyn(density, theta, fd: FdModel, theta_v, kernel_weights, grid: RingGrid,
                  colloc: CollocationSet) -> float:
    """Mean squared residual over the collocation points."""
    f = residual(density, theta, fd, theta_v, kernel_weights, grid, colloc.points[:, 0], colloc.points[:, 1])
    return float(np.mean(f * f))


# ---------------------------------------------------------------------------
# constraint penalties

def kernel_penalties(w) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Negativity and increase penalties with their gradients in ``w``."""
    w = np.asarray(w, dtype=float)
    neg = np.minimum(w, 0.0)
    inc = np.maximum(np.diff(w), 0.0)
    g1 = 2.0 * neg
    g2 = np.zeros_like(w)
    g2[1:] += 2.0 * inc
    g2[:-1] -= 2.0 * inc
    return float(np.sum(neg**2)), float(np.sum(inc**2)), g1, g2


def density_grid(rho_max: float, n_rho: int) -> np.ndarray:
    """Penalty evaluation densities ``i * rho_max / n_rho`` for ``i < n_rho``."""
    return np.arange(n_rho) * (rho_max / n_rho)


def _fd_penalty_term(fd, theta_v, rho_pts, weights):
    v, dv, tape = fd.evaluate(theta_v, rho_pts)
    neg = np.minimum(v, 0.0)
    inc = np.maximum(dv, 0.0)
    value = weights.p_v_1 * float(np.sum(neg**2)) + weights.p_v_2 * float(np.sum(inc**2))
    return value, (tape, 2.0 * weights.p_v_1 * neg, 2.0 * weights.p_v_2 * inc)


def loss_phys_static(fd: FdModel, theta_v, theta_omega, weights: LossWeights,
                     rho_max: float, n_rho: int = 100) -> float:
    """Weighted sum of the two kernel and two speed-density penalties.

    ``theta_omega`` is the raw kernel vector (normalised here) or ``None`` when
    the kernel is fixed and contributes nothing.
    """
    value = 0.0
    if theta_omega is not None:
        p1, p2, _, _ = kernel_penalties(normalized_kernel(theta_omega))
        value += weights.p_omega_1 * p1 + weights.p_omega_2 * p2
    value += _fd_penalty_term(fd, theta_v, density_grid(rho_max, n_rho), weights)[0]
    return value


# ---------------------------------------------------------------------------
# full objective

@dataclass
class LossResult:
    total: float
    data: float
    phy_d: float
    phy_s: float
    g_theta: np.ndarray
    g_theta_v: np.ndarray
    g_theta_omega: Optional[np.ndarray]


class PinnProblem:
    """Everything fixed during one training run, with encodings precomputed.

    ``kernel`` is either ``"learned"`` (with ``n_eta`` cells) or a fixed
    :class:`DiscreteKernel`.
    """

    def __init__(self, grid: RingGrid, meas: MeasurementSet, colloc: CollocationSet,
                 density: DensityModel, fd: FdModel, kernel, weights: LossWeights,
                 rho_max: float = 0.2, n_rho: int = 100, n_eta: Optional[int] = None):
        self.grid = grid
        self.meas = meas
        self.colloc = colloc
        self.density = density
        self.fd = fd
        self.weights = weights
        self.rho_max = float(rho_max)
        self.n_rho = int(n_rho)
        if isinstance(kernel, DiscreteKernel):
            self.fixed_kernel = kernel.weights.copy()
            self.n_eta = kernel.n_eta
        elif kernel == "learned":
            if n_eta is None or n_eta < 1:
                raise ConfigError("a learned kernel needs n_eta >= 1")
            self.fixed_kernel = None
            self.n_eta = int(n_eta)
        else:
            raise ConfigError(f"kernel must be 'learned' or a DiscreteKernel, got {kernel!r}")
        if self.n_eta > grid.n_x:
            raise ConfigError("kernel longer than the ring")
        weights.detector_weights(meas.n_detectors)
        (ti, xi), (td, xd) = _data_points(grid, meas)
        self._data_X = np.concatenate([density.encode(ti, xi)[0], density.encode(td, xd)[0]])
        self._pts = _ResidualPoints(density, grid, colloc.points[:, 0], colloc.points[:, 1], self.n_eta)
        self._rho_pts = density_grid(self.rho_max, self.n_rho)

    @property
    def learns_kernel(self) -> bool:
        return self.fixed_kernel is None

    def kernel_weights(self, theta_omega) -> np.ndarray:
        return self.fixed_kernel if self.fixed_kernel is not None else normalized_kernel(theta_omega)

    def evaluate(self, theta, theta_v, theta_omega=None, want_grad=True) -> LossResult:
        w = self.kernel_weights(theta_omega)
        d_val, (d_tape, d_g) = _data_term(self.density, theta, self.grid, self.meas, self.weights, self._data_X)
        f, pullback = _residual_core(self.density, theta, self.fd, theta_v, w, self._pts, want_grad)
        n_p = len(f)
        phy_d = float(np.dot(f, f) / n_p)
        s_val, (s_tape, g_neg, g_inc) = _fd_penalty_term(self.fd, theta_v, self._rho_pts, self.weights)
        if self.learns_kernel:
            p1, p2, gk1, gk2 = kernel_penalties(w)
            s_val += self.weights.p_omega_1 * p1 + self.weights.p_omega_2 * p2
        total = d_val + phy_d + s_val
        if not want_grad:
            return LossResult(total, d_val, phy_d, s_val, None, None, None)

        g_theta = self.density.backward(d_tape, d_g)
        gt, g_theta_v, g_w = pullback(2.0 * f / n_p)
        g_theta = g_theta + gt
        gv_static, _ = self.fd.backward(s_tape, g_neg, g_inc)
        g_theta_v = g_theta_v + gv_static
        g_omega = None
        if self.learns_kernel:
            g_w = g_w + self.weights.p_omega_1 * gk1 + self.weights.p_omega_2 * gk2
            g_omega = _normalize_backward(np.asarray(theta_omega, dtype=float), g_w)
        return LossResult(total, d_val, phy_d, s_val, g_theta, g_theta_v, g_omega)


def loss_total_and_grads(problem: PinnProblem, theta, theta_v, theta_omega=None):
    """``(total, g_theta, g_theta_v, g_theta_omega)``; the last is ``None`` for a fixed kernel."""
    r = problem.evaluate(theta, theta_v, theta_omega)
    return r.total, r.g_theta, r.g_theta_v, r.g_theta_omega
