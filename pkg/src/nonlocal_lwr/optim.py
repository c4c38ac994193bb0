"""ADAM and L-BFGS over a flat parameter vector.

Both are written as explicit state + step functions so training can be
checkpointed between any two iterations and resumed bit-exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

log = logging.getLogger(__name__)

LossAndGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]


class OptimizerError(ArithmeticError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    step: int = 0


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> tuple[AdamState, np.ndarray]:
    grads = np.asarray(grads, dtype=float)
    if grads.shape != params.shape:
        raise OptimizerError(f"gradient shape {grads.shape} does not match parameters {params.shape}")
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        raise OptimizerError(f"non-finite gradient at component {int(bad[0])}")
    m = np.zeros_like(params) if state.m is None else state.m
    v = np.zeros_like(params) if state.v is None else state.v
    t = state.step + 1
    m = state.beta1 * m + (1.0 - state.beta1) * grads
    v = state.beta2 * v + (1.0 - state.beta2) * (grads * grads)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return AdamState(state.lr, state.beta1, state.beta2, state.eps, m, v, t), new


# ---------------------------------------------------------------------------
# L-BFGS

@dataclass
class LbfgsState:
    history_size: int = 20
    c1: float = 1e-4
    c2: float = 0.9
    max_evals: int = 25
    grad_tol: float = 1e-9
    s_hist: list = field(default_factory=list)
    y_hist: list = field(default_factory=list)
    f: Optional[float] = None
    g: Optional[np.ndarray] = None
    n_iter: int = 0
    n_evals: int = 0
    message: str = ""


def two_loop_direction(g: np.ndarray, s_hist, y_hist) -> np.ndarray:
    """``-H g`` with the limited-memory inverse Hessian built from curvature pairs."""
    q = g.copy()
    alphas = []
    rhos = [1.0 / np.dot(y, s) for s, y in zip(s_hist, y_hist)]
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rhos)):
        a = rho * np.dot(s, q)
        alphas.append(a)
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rhos), reversed(alphas)):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return -q


def _cubic_min(a, fa, da, b, fb, db):
    """Minimiser of the cubic through two points with slopes, or None."""
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    rad = d1 * d1 - da * db
    if rad < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(rad)
    x = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2)
    return x if np.isfinite(x) else None


def strong_wolfe(phi, f0: float, dphi0: float, alpha: float, c1: float, c2: float, max_evals: int):
    """Line search for the strong Wolfe conditions.

    ``phi(a)`` returns ``(f, g, dphi)``. Returns ``(alpha, f, g, n_evals)``;
    ``alpha`` is ``None`` when no point with sufficient decrease was found.
    Non-finite trial values shrink the step.
    """
    evals = 0
    a_prev, f_prev, d_prev = 0.0, f0, dphi0
    best = None  # best point that satisfies sufficient decrease

    def armijo(a, f):
        return f <= f0 + c1 * a * dphi0

    def zoom(lo, flo, dlo, glo, hi, fhi, dhi):
        nonlocal evals, best
        while evals < max_evals:
            a = None
            if np.isfinite(fhi) and dhi is not None:
                a = _cubic_min(lo, flo, dlo, hi, fhi, dhi)
            lo_b, hi_b = min(lo, hi), max(lo, hi)
            width = hi_b - lo_b
            if a is None or not (lo_b + 0.1 * width <= a <= hi_b - 0.1 * width):
                a = 0.5 * (lo + hi)
            f, g, d = phi(a)
            evals += 1
            if not np.isfinite(f):
                hi, fhi, dhi = a, f, None
                continue
            if not armijo(a, f) or f >= flo:
                hi, fhi, dhi = a, f, d
            else:
                best = (a, f, g)
                if abs(d) <= -c2 * dphi0:
                    return a, f, g
                if d * (hi - lo) >= 0:
                    hi, fhi, dhi = lo, flo, dlo
                lo, flo, dlo = a, f, d
            if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
                break
        if best is not None:
            return best
        return None, None, None

    g_prev = None
    while evals < max_evals:
        f, g, d = phi(alpha)
        evals += 1
        if not np.isfinite(f):
            alpha = 0.5 * (a_prev + alpha)
            continue
        if not armijo(alpha, f) or (evals > 1 and f >= f_prev):
            a, fa, ga = zoom(a_prev, f_prev, d_prev, g_prev, alpha, f, d)
            return a, fa, ga, evals
        best = (alpha, f, g)
        if abs(d) <= -c2 * dphi0:
            return alpha, f, g, evals
        if d >= 0:
            a, fa, ga = zoom(alpha, f, d, g, a_prev, f_prev, d_prev)
            return a, fa, ga, evals
        a_prev, f_prev, d_prev, g_prev = alpha, f, d, g
        alpha = 2.0 * alpha
    if best is not None:
        return best[0], best[1], best[2], evals
    return None, None, None, evals


def lbfgs_step(state: LbfgsState, params: np.ndarray, loss_and_grad: LossAndGrad):
    """One L-BFGS iteration. Returns ``(state, params, converged)``.

    The state caches the loss and gradient at ``params`` so consecutive steps
    evaluate the objective only inside the line search.
    """
    params = np.asarray(params, dtype=float)
    if state.f is None:
        f, g = loss_and_grad(params)
        state.n_evals += 1
        if not np.isfinite(f):
            raise OptimizerError("non-finite loss at the starting point")
        state.f, state.g = float(f), np.asarray(g, dtype=float)
    f, g = state.f, state.g
    if np.max(np.abs(g)) <= state.grad_tol:
        state.message = "gradient below tolerance"
        return state, params, True

    def attempt(direction, alpha0):
        def phi(a):
            fa, ga = loss_and_grad(params + a * direction)
            fa = float(fa)
            ga = np.asarray(ga, dtype=float)
            if not np.all(np.isfinite(ga)):
                fa = np.inf
            return fa, ga, float(np.dot(ga, direction))
        return strong_wolfe(phi, f, float(np.dot(g, direction)), alpha0, state.c1, state.c2, state.max_evals)

    d = two_loop_direction(g, state.s_hist, state.y_hist)
    if not state.s_hist or np.dot(g, d) >= 0:
        state.s_hist, state.y_hist = [], []
        d = -g
        alpha0 = min(1.0, 1.0 / np.sum(np.abs(g)))
    else:
        alpha0 = 1.0
    alpha, f_new, g_new, n = attempt(d, alpha0)
    state.n_evals += n
    if alpha is None and state.s_hist:
        log.debug("line search failed along quasi-Newton direction; retrying steepest descent")
        state.s_hist, state.y_hist = [], []
        d = -g
        alpha, f_new, g_new, n = attempt(d, min(1.0, 1.0 / np.sum(np.abs(g))))
        state.n_evals += n
    if alpha is None or not f_new <= f:
        state.message = "line search failed"
        return state, params, True

    s = alpha * d
    y = g_new - g
    sy = float(np.dot(s, y))
    if sy > 1e-12 * float(np.dot(y, y)) and sy > 0:
        state.s_hist.append(s)
        state.y_hist.append(y)
        if len(state.s_hist) > state.history_size:
            state.s_hist.pop(0)
            state.y_hist.pop(0)
    new_params = params + s
    state.f, state.g = float(f_new), g_new
    state.n_iter += 1
    converged = bool(np.max(np.abs(g_new)) <= state.grad_tol)
    if converged:
        state.message = "gradient below tolerance"
    return state, new_params, converged


def minimize_lbfgs(fun: LossAndGrad, x0, max_iter: int = 100, **state_kw):
    """Run :func:`lbfgs_step` until convergence. Returns ``(x, state)``."""
    state = LbfgsState(**state_kw)
    x = np.asarray(x0, dtype=float)
    for _ in range(max_iter):
        state, x, done = lbfgs_step(state, x, fun)
        if done:
            break
    return x, state
