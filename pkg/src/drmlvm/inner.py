"""Per-subject posterior mode of L(b) = log g(y|b) + log h(b)."""

from collections import namedtuple
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ModeFailure, NumericDomainError
from .model import LOG_2PI

GRAD_TOL = 1e-8
MAX_ITER = 100
MAX_HALVINGS = 30
DECREMENT_TOL = 1e-10
ROUNDOFF_DECREMENT = 1e-20

ModeBatch = namedtuple("ModeBatch", "modes log_density chol log_det_sigma iterations")


@dataclass(frozen=True, eq=False)
class SubjectMode:
    mode: np.ndarray
    log_density_at_mode: float
    chol_factor: np.ndarray
    newton_iterations: int

    @property
    def log_det_sigma(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.chol_factor))))


def joint_logdensity(st, Y, B):
    """L(b) for a batch: Y is (n, P), B is (n, ..., q); returns (n, ...)."""
    eta = st.intercepts + B @ st.loadings.T
    Yb = Y.reshape(Y.shape[:1] + (1,) * (B.ndim - 2) + Y.shape[1:])
    logg = np.sum(Yb * eta - np.logaddexp(0.0, eta), axis=-1)
    # b' Psi^-1 b as |L^-1 b|^2, better conditioned than forming it with Psi^-1
    u = B @ st.inv_chol_t
    quad = np.sum(u * u, axis=-1)
    q = st.psi.shape[0]
    return logg - 0.5 * quad - 0.5 * (q * LOG_2PI + st.psi_logdet)


def _value_grad_hess(st, Y, B):
    eta = st.intercepts + B @ st.loadings.T
    logg = np.sum(Y * eta - np.logaddexp(0.0, eta), axis=-1)
    u = B @ st.inv_chol_t
    z = u @ st.inv_chol_t.T
    q = st.psi.shape[0]
    value = logg - 0.5 * np.sum(u * u, axis=-1) - 0.5 * (q * LOG_2PI + st.psi_logdet)
    prob = expit(eta)
    grad = (Y - prob) @ st.loadings - z
    w = prob * (1.0 - prob)
    hess = -np.einsum("nr,rk,rl->nkl", w, st.loadings, st.loadings) - st.psi_inv
    return value, grad, hess


def joint_logdensity_with_derivatives(y, theta, spec, b):
    """Value, gradient and Hessian of L at a single latent vector b."""
    b = np.asarray(b, dtype=float)
    if b.shape != (spec.q,):
        raise ValueError(f"b must have shape ({spec.q},), got {b.shape}")
    y = np.asarray(y, dtype=float)
    if y.shape != (spec.n_responses,):
        raise ValueError(f"y must have length {spec.n_responses}")
    st = spec.structure(theta)
    v, g, h = _value_grad_hess(st, y[None, :], b[None, :])
    return float(v[0]), g[0], h[0]


def _lower_sigma_factor(neg_hess):
    """Lower-triangular C with C C^T = inv(neg_hess), without forming the inverse.

    neg_hess = U U^T with U upper triangular (Cholesky of the
    index-reversed matrix), so inv(neg_hess) = U^-T U^-1 and C = U^-T.
    """
    flipped = neg_hess[..., ::-1, ::-1]
    try:
        lower = np.linalg.cholesky(flipped)
    except np.linalg.LinAlgError as exc:
        raise NumericDomainError("negative Hessian of L is not positive definite") from exc
    upper = lower[..., ::-1, ::-1]
    return np.swapaxes(np.linalg.inv(upper), -1, -2)


def _newton(grad, hess):
    step = np.linalg.solve(-hess, grad[..., None])[..., 0]
    return step, np.sum(step * grad, axis=-1)


def _is_small(grad, value, decrement, tol):
    # the decrement test covers nearly singular Psi, where round-off in
    # Psi^-1 b keeps the gradient above tol although the mode is exact
    return (np.max(np.abs(grad), axis=-1) < tol) | (decrement < ROUNDOFF_DECREMENT * np.maximum(1.0, np.abs(value)))


def find_modes(st, Y, start=None, tol=GRAD_TOL, max_iter=MAX_ITER):
    """Damped Newton on every row of Y simultaneously.

    Converged rows receive one extra Newton step, which in the quadratic
    region drives the gradient to round-off level and keeps the outer
    objective smooth under finite differencing.
    """
    n = Y.shape[0]
    q = st.psi.shape[0]
    B = np.zeros((n, q)) if start is None else np.array(start, dtype=float).reshape(n, q)
    iters = np.zeros(n, dtype=int)
    value, grad, hess = _value_grad_hess(st, Y, B)
    active = np.ones(n, dtype=bool)
    polish = np.zeros(n, dtype=bool)
    for _ in range(max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        step, decrement = _newton(grad[idx], hess[idx])
        small = _is_small(grad[idx], value[idx], decrement, tol)
        done = small & polish[idx]
        active[idx[done]] = False
        polish[idx[small]] = True
        idx, step, decrement, small = idx[~done], step[~done], decrement[~done], small[~done]
        if idx.size == 0 or np.all(iters[idx] >= max_iter):
            break
        Bi, vi = B[idx], value[idx]
        t = np.ones(idx.size)
        trial = Bi + step
        tv, tg, th = _value_grad_hess(st, Y[idx], trial)
        # a decrement at round-off level means the full step is already exact
        ok = (tv >= vi) | (decrement < DECREMENT_TOL * np.maximum(1.0, np.abs(vi))) | small
        for _ in range(MAX_HALVINGS):
            if ok.all():
                break
            bad = ~ok
            t[bad] *= 0.5
            trial[bad] = Bi[bad] + t[bad, None] * step[bad]
            v2, g2, h2 = _value_grad_hess(st, Y[idx][bad], trial[bad])
            tv[bad], tg[bad], th[bad] = v2, g2, h2
            ok[bad] = v2 >= vi[bad]
        # rows still failing after all halvings stay put
        B[idx[ok]], value[idx[ok]] = trial[ok], tv[ok]
        grad[idx[ok]], hess[idx[ok]] = tg[ok], th[ok]
        iters[idx] += 1
    if active.any():
        idx = np.flatnonzero(active)
        _, decrement = _newton(grad[idx], hess[idx])
        active[idx[_is_small(grad[idx], value[idx], decrement, tol)]] = False
    if active.any():
        bad = np.flatnonzero(active)
        raise ModeFailure(f"mode search did not converge for {bad.size} subject(s) in {max_iter} iterations",
                          last_iterate=B[bad].copy(), subjects=bad)
    chol = _lower_sigma_factor(-hess)
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    return ModeBatch(B, value, chol, logdet, iters)


def find_mode(y, theta, spec, warm_start=None, tol=GRAD_TOL, max_iter=MAX_ITER):
    y = np.asarray(y, dtype=float)
    if y.shape != (spec.n_responses,):
        raise ValueError(f"y must have length {spec.n_responses}")
    st = spec.structure(theta)
    start = None if warm_start is None else np.asarray(warm_start, dtype=float)[None, :]
    res = find_modes(st, y[None, :], start, tol=tol, max_iter=max_iter)
    return SubjectMode(res.modes[0], float(res.log_density[0]), res.chol[0], int(res.iterations[0]))
