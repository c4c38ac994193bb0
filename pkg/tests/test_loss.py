import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import TravellingWave, constant_speed_fd, fd_block_errors, miniature_problem, perturbed_state
from nonlocal_lwr.grid import ConfigError, Field, RingGrid, subsample_measurements
from nonlocal_lwr.kernels import DegenerateKernelError, DiscreteKernel, local_kernel
from nonlocal_lwr.loss import (CollocationSet, DensityModel, LearnedFd, LossWeights, PinnProblem, density_grid,
                               kernel_penalties, loss_data, loss_phys_dyn, loss_phys_static, loss_total_and_grads,
                               normalized_kernel, residual)
from nonlocal_lwr.mlp import MlpSpec, glorot_init


def density_net(seed, grid, layers=2, width=8):
    dm = DensityModel(MlpSpec(3, layers, width, 1, "tanh", "softplus"), grid.horizon_s, grid.ring_length_m)
    return dm, glorot_init(dm.spec, np.random.default_rng(seed)) * 2.0


def local_residual(dm, theta, fd, theta_v, grid, t_idx, x_idx):
    """Local LWR residual rho_t + d/dx [rho V(rho)], assembled independently."""
    rho, rho_t, rho_x, _ = dm.evaluate(theta, grid.t[t_idx], grid.x[x_idx], d_t=True, d_x=True)
    v, dv, _ = fd.evaluate(theta_v, rho)
    return rho_t + (v + rho * dv) * rho_x


# -- data term ---------------------------------------------------------------

def _grid_and_meas(offset=0.0, detectors=(0, 5, 11)):
    g = RingGrid.from_lengths(16.0, 1.0, 6.0, 1.0)
    dm, theta = density_net(3, g)
    rho = dm.evaluate(theta, np.repeat(g.t, g.n_x), np.tile(g.x, g.n_t))[0].reshape(g.shape)
    return g, dm, theta, subsample_measurements(Field(g, rho - offset), detectors)


def test_data_loss_zero_on_perfect_fit():
    g, dm, theta, meas = _grid_and_meas()
    assert loss_data(dm, theta, g, meas, LossWeights()) == pytest.approx(0.0, abs=1e-30)


@pytest.mark.parametrize("detectors", [(0,), (0, 5, 11), (1, 2, 3, 4, 9)])
def test_data_loss_constant_offset(detectors):
    delta = 0.013
    g, dm, theta, meas = _grid_and_meas(delta, detectors)
    expected = (1 + len(detectors)) * delta**2
    assert loss_data(dm, theta, g, meas, LossWeights()) == pytest.approx(expected, rel=1e-12)


def test_data_loss_linear_in_weights():
    g, dm, theta, meas = _grid_and_meas(0.01)
    w1 = LossWeights(0.7, (0.3, 1.1, 2.0))
    w2 = LossWeights(1.4, (0.6, 2.2, 4.0))
    assert loss_data(dm, theta, g, meas, w2) == pytest.approx(2 * loss_data(dm, theta, g, meas, w1), rel=1e-14)


def test_loss_weights_validation():
    with pytest.raises(ConfigError):
        LossWeights(alpha_initial=0.0)
    with pytest.raises(ConfigError):
        LossWeights(p_v_2=-1.0)
    with pytest.raises(ConfigError, match="3 detector weights for 2"):
        LossWeights(alpha_detector=(1.0, 1.0, 1.0)).detector_weights(2)


# -- residual ----------------------------------------------------------------

def test_residual_vanishes_on_constant_field():
    g = RingGrid.from_lengths(16.0, 1.0, 6.0, 1.0)
    dm = DensityModel(MlpSpec(3, 2, 8, 1, "tanh", "softplus"), g.horizon_s, g.ring_length_m)
    theta = np.zeros(dm.n_params)
    theta[-1] = 0.4
    fd = LearnedFd(MlpSpec(1, 1, 8))
    theta_v = glorot_init(fd.spec, np.random.default_rng(0))
    ti, xi = np.meshgrid(np.arange(g.n_t), np.arange(g.n_x), indexing="ij")
    f = residual(dm, theta, fd, theta_v, [0.4, 0.3, 0.2, 0.1], g, ti.ravel(), xi.ravel())
    assert np.all(f == 0.0)


@pytest.mark.parametrize("a,b,c", [(0.05, 0.02, 12.0), (0.1, 0.05, 3.0), (0.02, 0.01, 29.0)])
def test_manufactured_transport_solution(a, b, c):
    g = RingGrid.from_lengths(800.0, 1.0, 200.0, 1.0)
    wave = TravellingWave(a, b, c, g.ring_length_m)
    fd, theta_v = constant_speed_fd(c)
    colloc = CollocationSet.sample(g, 512, 99)
    f = residual(wave, None, fd, theta_v, [1.0], g, colloc.points[:, 0], colloc.points[:, 1])
    assert np.max(np.abs(f)) < 1e-8
    # the same wave is not a solution at another speed
    fd2, theta_v2 = constant_speed_fd(c + 1.0)
    f2 = residual(wave, None, fd2, theta_v2, [1.0], g, colloc.points[:, 0], colloc.points[:, 1])
    k = 2 * np.pi / g.ring_length_m
    assert np.max(np.abs(f2)) == pytest.approx(b * k, rel=1e-3)  # |f| = b k |cos| for a 1 m/s mismatch


@pytest.mark.parametrize("seed", range(5))
def test_unit_kernel_matches_local_residual(seed):
    g = RingGrid.from_lengths(16.0, 1.0, 6.0, 1.0)
    dm, theta = density_net(seed, g)
    fd = LearnedFd(MlpSpec(1, 1, 8))
    theta_v = glorot_init(fd.spec, np.random.default_rng(seed + 100))
    ti, xi = np.meshgrid(np.arange(g.n_t), np.arange(g.n_x), indexing="ij")
    ti, xi = ti.ravel(), xi.ravel()
    f = residual(dm, theta, fd, theta_v, local_kernel(g.dx_m).weights, g, ti, xi)
    ref = local_residual(dm, theta, fd, theta_v, g, ti, xi)
    assert np.max(np.abs(f - ref)) <= 1e-12


class Ramp:
    """rho = a + s x, deliberately not periodic so wrapped reads are visible."""

    def __init__(self, a, s):
        self.a, self.s = a, s

    encode = TravellingWave.encode

    def evaluate_encoded(self, params, X, ut=None, ux=None):
        n = len(X)
        return (self.a + self.s * X[:, 1], np.zeros(n) if ut is not None else None,
                np.full(n, self.s) if ux is not None else None, None)


def test_residual_wraps_across_seam():
    g = RingGrid.from_lengths(16.0, 1.0, 6.0, 1.0)
    ramp = Ramp(0.05, 0.002)
    fd = LearnedFd(MlpSpec(1, 1, 8))
    theta_v = glorot_init(fd.spec, np.random.default_rng(1))
    w = np.array([0.1, 0.2, 0.3, 0.4])
    f = residual(ramp, None, fd, theta_v, w, g, [2], [14])
    xs = g.x[[14, 15, 0, 1]]
    rho_eta = np.dot(w, 0.05 + 0.002 * xs)
    v, dv, _ = fd.evaluate(theta_v, [rho_eta])
    expected = 0.002 * v[0] + (0.05 + 0.002 * xs[0]) * dv[0] * 0.002
    assert f[0] == pytest.approx(expected, rel=1e-13)


def test_residual_rejects_kernel_longer_than_ring():
    g = RingGrid.from_lengths(16.0, 1.0, 6.0, 1.0)
    dm, theta = density_net(0, g)
    fd = LearnedFd(MlpSpec(1, 1, 8))
    with pytest.raises(ConfigError, match="longer than the ring"):
        residual(dm, theta, fd, np.zeros(fd.n_params), np.full(17, 1 / 17), g, [0], [0])


def test_residual_linear_in_time_derivative():
    """Cotangent probe: d f / d rho_t is exactly one."""
    g = RingGrid.from_lengths(16.0, 1.0, 6.0, 1.0)
    fd = LearnedFd(MlpSpec(1, 1, 8))
    theta_v = glorot_init(fd.spec, np.random.default_rng(2))
    w = [0.5, 0.3, 0.2]
    base = TravellingWave(0.05, 0.02, 5.0, g.ring_length_m)
    vals = []
    for c in (5.0, 7.0, 9.0):
        wave = TravellingWave(0.05, 0.02, 5.0, g.ring_length_m)
        orig = wave.evaluate_encoded

        def ev(p, X, ut=None, ux=None, c=c, orig=orig):
            rho, rt, rx, tape = orig(p, X, ut, ux)
            if rt is not None:
                rt = rt * c / 5.0
            return rho, rt, rx, tape

        wave.evaluate_encoded = ev
        vals.append(residual(wave, None, fd, theta_v, w, g, [1, 3], [4, 9]))
    rho_t = base.evaluate_encoded(None, base.encode(g.t[[1, 3]], g.x[[4, 9]])[0], ut=True)[1]
    np.testing.assert_allclose(vals[1] - vals[0], rho_t * 2.0 / 5.0, rtol=1e-12)
    np.testing.assert_allclose(vals[2] - vals[1], vals[1] - vals[0], rtol=1e-12)


# -- dynamics loss -----------------------------------------------------------

def test_phys_dyn_single_point_mean():
    g = RingGrid.from_lengths(800.0, 1.0, 200.0, 1.0)
    colloc = CollocationSet.sample(g, 512, 5)
    wave = TravellingWave(0.05, 0.0, 0.0, g.ring_length_m)  # constant field
    fd, theta_v = constant_speed_fd(0.0)
    target = tuple(colloc.points[17])

    def ev(p, X, ut=None, ux=None):
        rho, rt, rx, tape = TravellingWave.evaluate_encoded(wave, p, X, ut, ux)
        if rt is not None:
            hit = (X[:, 0] == g.t[target[0]]) & (X[:, 1] == g.x[target[1]])
            rt = np.where(hit, 2.0, rt)
        return rho, rt, rx, tape

    wave.evaluate_encoded = ev
    assert loss_phys_dyn(wave, None, fd, theta_v, [1.0], g, colloc) == 4.0 / 512


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1))
def test_phys_dyn_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    g = RingGrid.from_lengths(16.0, 1.0, 6.0, 1.0)
    dm, theta = density_net(seed % 7, g)
    fd = LearnedFd(MlpSpec(1, 1, 8))
    theta_v = glorot_init(fd.spec, rng)
    colloc = CollocationSet.sample(g, 40, seed)
    perm = CollocationSet(colloc.points[rng.permutation(40)], colloc.rng_seed)
    w = [0.4, 0.3, 0.2, 0.1]
    a = loss_phys_dyn(dm, theta, fd, theta_v, w, g, colloc)
    b = loss_phys_dyn(dm, theta, fd, theta_v, w, g, perm)
    assert a == pytest.approx(b, rel=1e-13)


def test_collocation_sampling():
    g = RingGrid.from_lengths(16.0, 1.0, 6.0, 1.0)
    c = CollocationSet.sample(g, 50, 11)
    assert len(c) == 50
    assert len({tuple(p) for p in c.points}) == 50
    assert c.points[:, 0].max() < g.n_t and c.points[:, 1].max() < g.n_x and c.points.min() >= 0
    np.testing.assert_array_equal(c.points, CollocationSet.sample(g, 50, 11).points)
    with pytest.raises(ConfigError):
        CollocationSet.sample(g, g.n_t * g.n_x + 1, 0)


# -- static loss -------------------------------------------------------------

def _feasible_fd():
    """Greenshields-like speed curve expressed through the network: tanh unit, negative slope."""
    fd = LearnedFd(MlpSpec(1, 1, 8))
    p = np.zeros(fd.n_params)
    (w1, b1), (w2, b2) = fd.spec.unpack(p)
    w1[0, 0] = 1.0
    w2[0, 0] = -0.5
    b2[0] = 0.9
    return fd, p


def test_static_zero_when_feasible():
    fd, p = _feasible_fd()
    assert loss_phys_static(fd, p, np.array([0.6, 0.4]), LossWeights(), 0.2) == 0.0


def test_static_monotonicity_example():
    fd, p = _feasible_fd()
    assert loss_phys_static(fd, p, np.array([0.4, 0.6]), LossWeights(), 0.2) == pytest.approx(400.0, rel=1e-12)


def test_static_both_kernel_penalties():
    fd, p = _feasible_fd()
    val = loss_phys_static(fd, p, np.array([-0.5, 1.5]), LossWeights(), 0.2)
    assert val == pytest.approx(2500.0 + 40000.0, rel=1e-12)


def test_static_speed_penalties():
    fd = LearnedFd(MlpSpec(1, 1, 8), 0.2, 30.0)
    p = np.zeros(fd.n_params)
    p[-1] = -0.1  # V = -3 everywhere, flat
    val = loss_phys_static(fd, p, None, LossWeights(p_v_1=2.0), 0.2, 10)
    assert val == pytest.approx(2.0 * 10 * 9.0)
    # rising speed: V = 30 * rho / 0.2, dV = 150 on all ten grid densities
    fd2 = LearnedFd(MlpSpec(1, 1, 8), 0.2, 30.0)
    q = np.zeros(fd2.n_params)
    (w1, b1), (w2, b2) = fd2.spec.unpack(q)
    w1[0, 0], w2[0, 0] = 1e-4, 1e4
    val2 = loss_phys_static(fd2, q, None, LossWeights(p_v_2=1.0), 0.2, 10)
    assert val2 == pytest.approx(10 * 150.0**2, rel=1e-6)


def test_density_grid():
    np.testing.assert_allclose(density_grid(0.2, 4), [0.0, 0.05, 0.1, 0.15])


def test_kernel_penalties_gradient():
    w = np.array([0.3, -0.1, 0.5, 0.2])
    p1, p2, g1, g2 = kernel_penalties(w)
    assert p1 == pytest.approx(0.01) and p2 == pytest.approx(0.36)
    for i in range(4):
        e = np.zeros(4)
        e[i] = 1e-7
        hp, hm = kernel_penalties(w + e), kernel_penalties(w - e)
        assert (hp[0] - hm[0]) / 2e-7 == pytest.approx(g1[i], abs=1e-7)
        assert (hp[1] - hm[1]) / 2e-7 == pytest.approx(g2[i], abs=1e-7)


# -- total loss and gradients ------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(seed):
    prob, rng = miniature_problem(seed)
    s = perturbed_state(prob, rng)
    errors, _ = fd_block_errors(prob, s.theta, s.theta_v, s.theta_omega, h=1e-6)
    assert set(errors) == {"theta", "theta_v", "theta_omega"}
    assert max(errors.values()) < 1e-5, errors


@pytest.mark.parametrize("seed", range(4))
def test_gradients_with_active_speed_penalties(seed):
    prob, rng = miniature_problem(seed + 100)
    s = perturbed_state(prob, rng, sorted_kernel=True)
    s.theta_v[-1] = 0.0  # speed curve now crosses zero inside the density grid
    r = prob.evaluate(s.theta, s.theta_v, s.theta_omega)
    errors, _ = fd_block_errors(prob, s.theta, s.theta_v, s.theta_omega)
    assert errors["theta"] < 1e-5 and errors["theta_v"] < 1e-5
    assert r.phy_s > 0


@pytest.mark.parametrize("seed", range(3))
def test_gradients_fixed_kernel(seed):
    prob, rng = miniature_problem(seed, kernel=DiscreteKernel(8.0, 2.0, np.array([0.4, 0.3, 0.2, 0.1])))
    s = perturbed_state(prob, rng)
    assert s.theta_omega is None
    errors, r = fd_block_errors(prob, s.theta, s.theta_v, None)
    assert r.g_theta_omega is None
    assert max(errors.values()) < 1e-5


def test_static_gradient_zero_with_margin():
    prob, rng = miniature_problem(0)
    s = perturbed_state(prob, rng, sorted_kernel=True)
    r = prob.evaluate(s.theta, s.theta_v, s.theta_omega)
    assert r.phy_s == 0.0
    # static penalties off entirely: gradients must be identical
    loose = miniature_problem(0, weights=LossWeights(p_omega_1=1e-300, p_omega_2=1e-300,
                                                     p_v_1=1e-300, p_v_2=1e-300))[0]
    r2 = loose.evaluate(s.theta, s.theta_v, s.theta_omega)
    np.testing.assert_array_equal(r.g_theta_v, r2.g_theta_v)
    np.testing.assert_array_equal(r.g_theta_omega, r2.g_theta_omega)


@settings(max_examples=15)
@given(st.floats(1e-3, 1e3))
def test_total_loss_invariant_to_kernel_scale(c):
    prob, rng = miniature_problem(7)
    s = perturbed_state(prob, rng)
    a = prob.evaluate(s.theta, s.theta_v, s.theta_omega)
    b = prob.evaluate(s.theta, s.theta_v, c * s.theta_omega)
    assert b.total == pytest.approx(a.total, rel=1e-12)
    np.testing.assert_allclose(b.g_theta, a.g_theta, rtol=1e-9, atol=1e-14)
    np.testing.assert_allclose(b.g_theta_v, a.g_theta_v, rtol=1e-9, atol=1e-14)
    # the kernel gradient is orthogonal to theta_omega and scales as 1/c
    assert abs(np.dot(a.g_theta_omega, s.theta_omega)) < 1e-10 * np.linalg.norm(a.g_theta_omega) * np.linalg.norm(
        s.theta_omega) + 1e-18
    np.testing.assert_allclose(c * b.g_theta_omega, a.g_theta_omega, rtol=1e-8, atol=1e-14)


def test_components_nonnegative_and_sum():
    prob, rng = miniature_problem(3)
    s = perturbed_state(prob, rng)
    r = prob.evaluate(s.theta, s.theta_v, s.theta_omega)
    assert r.data >= 0 and r.phy_d >= 0 and r.phy_s >= 0
    assert r.total == r.data + r.phy_d + r.phy_s
    total, gt, gv, go = loss_total_and_grads(prob, s.theta, s.theta_v, s.theta_omega)
    assert total == r.total
    np.testing.assert_array_equal(go, r.g_theta_omega)


def test_degenerate_kernel_sum():
    prob, rng = miniature_problem(1)
    s = perturbed_state(prob, rng)
    with pytest.raises(DegenerateKernelError, match="sum"):
        prob.evaluate(s.theta, s.theta_v, np.array([1.0, -1.0, 0.5, -0.5]))
    with pytest.raises(DegenerateKernelError):
        normalized_kernel([0.0, 0.0])


def test_problem_validation():
    prob, _ = miniature_problem(0)
    with pytest.raises(ConfigError, match="n_eta"):
        PinnProblem(prob.grid, prob.meas, prob.colloc, prob.density, prob.fd, "learned", LossWeights())
    with pytest.raises(ConfigError, match="longer than the ring"):
        PinnProblem(prob.grid, prob.meas, prob.colloc, prob.density, prob.fd, "learned", LossWeights(), n_eta=17)
    with pytest.raises(ConfigError, match="detector weights"):
        PinnProblem(prob.grid, prob.meas, prob.colloc, prob.density, prob.fd, "learned",
                    LossWeights(alpha_detector=(1.0, 2.0)), n_eta=4)
