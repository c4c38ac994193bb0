"""Shared builders and oracles for the test suite."""

import numpy as np

from nonlocal_lwr.grid import Field, RingGrid, subsample_measurements
from nonlocal_lwr.loss import CollocationSet, DensityModel, LearnedFd, LossWeights, PinnProblem
from nonlocal_lwr.mlp import MlpSpec
from nonlocal_lwr.training import init_state


def miniature_problem(seed, n_eta=4, kernel="learned", weights=None, n_points=24):
    """n_x = 16 ring of 2 m cells, density net 2x8, speed net 1x8, random smooth measurements."""
    rng = np.random.default_rng(seed)
    g = RingGrid.from_lengths(32.0, 2.0, 6.0, 1.0)
    tt, xx = np.meshgrid(g.t, g.x, indexing="ij")
    vals = 0.05 + 0.02 * np.sin(2 * np.pi * (xx - 3.0 * tt) / 32.0 + rng.uniform(0, 6.3))
    meas = subsample_measurements(Field(g, vals), (0, 5, 11))
    dm = DensityModel(MlpSpec(3, 2, 8, 1, "tanh", "softplus"), g.horizon_s, g.ring_length_m, 0.2)
    fd = LearnedFd(MlpSpec(1, 1, 8), 0.2, 30.0)
    colloc = CollocationSet.sample(g, n_points, int(rng.integers(2**32)))
    prob = PinnProblem(g, meas, colloc, dm, fd, kernel, weights or LossWeights(), 0.2, 20,
                       n_eta if kernel == "learned" else None)
    return prob, rng


def decreasing_speed_params(spec, rng):
    """One-hidden-layer speed net that is positive and strictly decreasing on [0, inf):
    each unit's output weight has the opposite sign to its input weight."""
    assert spec.hidden_layers == 1
    params = np.zeros(spec.n_params)
    (w1, b1), (w2, b2) = spec.unpack(params)
    sign = rng.choice([-1.0, 1.0], size=w1.shape)
    w1[...] = sign * rng.uniform(0.5, 3.0, size=w1.shape)
    b1[...] = rng.normal(size=b1.shape)
    w2[...] = -sign.T * rng.uniform(0.05, 0.2, size=w2.shape)
    b2[...] = 0.1 + np.abs(w2).sum()
    return params


def perturbed_state(prob, rng, scale=1.0, sorted_kernel=False):
    """Random parameters: a varied density field, a feasible sloped speed curve
    and a random kernel vector (monotone only if ``sorted_kernel``)."""
    st = init_state(prob, int(rng.integers(2**32)))
    st.theta = st.theta + scale * rng.normal(size=st.theta.shape)
    if prob.fd.trainable:
        st.theta_v = decreasing_speed_params(prob.fd.spec, rng)
    if st.theta_omega is not None:
        om = 0.5 + rng.random(len(st.theta_omega))
        st.theta_omega = np.sort(om)[::-1] if sorted_kernel else om
    return st


def fd_block_errors(prob, theta, theta_v, theta_omega, h=1e-6):
    """Relative 2-norm error of each analytic gradient block against central differences.

    The difference of the total is accumulated term by term (data, dynamics,
    static) so that a large term that does not depend on the perturbed block
    cannot swamp the difference through cancellation.
    """
    r = prob.evaluate(theta, theta_v, theta_omega)
    blocks = {"theta": (theta, r.g_theta), "theta_v": (theta_v, r.g_theta_v)}
    if theta_omega is not None:
        blocks["theta_omega"] = (theta_omega, r.g_theta_omega)
    out = {}
    for name, (vec, g) in blocks.items():
        fd = np.empty_like(vec)
        for i in range(len(vec)):
            args = {"theta": theta, "theta_v": theta_v, "theta_omega": theta_omega}
            plus, minus = vec.copy(), vec.copy()
            plus[i] += h
            minus[i] -= h
            args[name] = plus
            rp = prob.evaluate(want_grad=False, **args)
            args[name] = minus
            rm = prob.evaluate(want_grad=False, **args)
            diff = (rp.data - rm.data) + (rp.phy_d - rm.phy_d) + (rp.phy_s - rm.phy_s)
            fd[i] = diff / (2 * h)
        out[name] = float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-300))
    return out, r


class TravellingWave:
    """Analytic stand-in for the density network: a + b sin(2 pi (x - c t) / L).

    The "encoding" is just (t, x), so derivatives come from the closed form.
    """

    def __init__(self, a, b, c, L):
        self.a, self.b, self.c, self.k = a, b, c, 2 * np.pi / L

    def encode(self, t, x):
        t, x = np.ravel(t).astype(float), np.ravel(x).astype(float)
        ux = np.tile([0.0, 1.0], (len(x), 1))
        return np.stack([t, x], axis=1), np.array([1.0, 0.0]), ux

    def evaluate_encoded(self, params, X, ut=None, ux=None):
        phase = self.k * (X[:, 1] - self.c * X[:, 0])
        rho = self.a + self.b * np.sin(phase)
        d = self.b * self.k * np.cos(phase)
        rho_t = -self.c * d if ut is not None else None
        rho_x = d if ux is not None else None
        return rho, rho_t, rho_x, None


def constant_speed_fd(c, v_scale=30.0):
    fd = LearnedFd(MlpSpec(1, 1, 8), 0.2, v_scale)
    p = np.zeros(fd.n_params)
    p[-1] = c / v_scale
    return fd, p
