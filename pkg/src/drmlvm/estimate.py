"""Outer maximization of the approximate log-likelihood and sandwich errors."""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .approx import WarmStart, _as_data, pattern_logliks
from .errors import ModeFailure, NumericDomainError, SingularHessianError
from .model import ParameterVector

EPS = np.finfo(float).eps
SINGULAR_TOL = 1e-6


@dataclass(frozen=True)
class FitOptions:
    max_feval: int = 500
    grad_tol: float = 1e-4
    loglik_tol: float = 1e-8
    max_step: float = 2.0
    max_backtracks: int = 30
    compute_se: bool = True


@dataclass(eq=False)
class FitResult:
    names: tuple
    theta_hat: ParameterVector
    standard_errors: np.ndarray
    loglik: float
    converged: bool
    n_feval: int
    wall_time_s: float
    bracket_fallback_count: int
    gradient_norm: float
    iterations: int = 0
    n_feval_se: int = 0
    hessian_pd: bool = False
    message: str = ""
    s: int = 0
    n_q: int = 0
    x_hat: np.ndarray = field(default=None, repr=False)

    def to_dict(self, timing=True):
        out = {
            "names": list(self.names),
            "intercepts": self.theta_hat.intercepts.tolist(),
            "loadings": self.theta_hat.loadings.tolist(),
            "cov": self.theta_hat.cov.tolist(),
            "estimates": self.theta_hat.flat.tolist(),
            "standard_errors": [_json_float(v) for v in np.asarray(self.standard_errors, dtype=float)],
            "loglik": _json_float(self.loglik),
            "converged": bool(self.converged),
            "n_feval": int(self.n_feval),
            "n_feval_se": int(self.n_feval_se),
            "bracket_fallback_count": int(self.bracket_fallback_count),
            "gradient_norm": _json_float(self.gradient_norm),
            "iterations": int(self.iterations),
            "hessian_pd": bool(self.hessian_pd),
            "message": self.message,
            "s": int(self.s),
            "n_q": int(self.n_q),
            "x_hat": None if self.x_hat is None else np.asarray(self.x_hat).tolist(),
        }
        if timing:
            out["wall_time_s"] = _json_float(self.wall_time_s)
        return out

    @classmethod
    def from_dict(cls, d):
        theta = ParameterVector(d["intercepts"], d["loadings"], d["cov"])
        return cls(
            names=tuple(d["names"]), theta_hat=theta,
            standard_errors=np.array([_from_json(v) for v in d["standard_errors"]], dtype=float),
            loglik=_from_json(d["loglik"]), converged=d["converged"], n_feval=d["n_feval"],
            wall_time_s=_from_json(d.get("wall_time_s")), bracket_fallback_count=d["bracket_fallback_count"],
            gradient_norm=_from_json(d["gradient_norm"]), iterations=d["iterations"], n_feval_se=d["n_feval_se"],
            hessian_pd=d["hessian_pd"], message=d["message"], s=d["s"], n_q=d["n_q"],
            x_hat=None if d.get("x_hat") is None else np.array(d["x_hat"], dtype=float),
        )


def _json_float(v):
    """Non-finite floats are stored as null."""
    v = float(v)
    return v if math.isfinite(v) else None


def _from_json(v):
    return float("nan") if v is None else float(v)


def _step(x, scale):
    """Per-coordinate step scale*max(1,|x|), rounded so x+h is exact."""
    h = scale * np.maximum(1.0, np.abs(x))
    return (x + h) - x


def numerical_gradient(f, x, max_halvings=5):
    """Central differences with h_k = eps^(1/3) max(1, |x_k|).

    A non-finite value at a probe halves that coordinate's step, up to
    ``max_halvings`` times.
    """
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    h_all = _step(x, EPS ** (1.0 / 3.0))
    for k in range(x.size):
        h = h_all[k]
        for _ in range(max_halvings + 1):
            xp, xm = x.copy(), x.copy()
            xp[k] += h
            xm[k] -= h
            fp, fm = f(xp), f(xm)
            if math.isfinite(fp) and math.isfinite(fm):
                g[k] = (fp - fm) / (xp[k] - xm[k])
                break
            h = 0.5 * h
        else:
            raise ArithmeticError(f"objective not finite near coordinate {k} after {max_halvings} step halvings")
    return g


def numerical_jacobian(f, x):
    """Central-difference Jacobian of a vector-valued f; rows are outputs."""
    x = np.asarray(x, dtype=float)
    h_all = _step(x, EPS ** (1.0 / 3.0))
    cols = []
    for k in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[k] += h_all[k]
        xm[k] -= h_all[k]
        fp, fm = np.asarray(f(xp), dtype=float), np.asarray(f(xm), dtype=float)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise ArithmeticError(f"per-subject log-likelihood not finite near coordinate {k}")
        cols.append((fp - fm) / (xp[k] - xm[k]))
    return np.stack(cols, axis=-1)


def numerical_hessian(f, x, f0=None):
    """Second differences of f with h_k = eps^(1/4) max(1, |x_k|)."""
    x = np.asarray(x, dtype=float)
    d = x.size
    h = _step(x, EPS ** 0.25)
    f0 = f(x) if f0 is None else f0
    H = np.empty((d, d))

    def at(*moves):
        z = x.copy()
        for k, sgn in moves:
            z[k] += sgn * h[k]
        return f(z)

    for i in range(d):
        H[i, i] = (at((i, 1)) - 2.0 * f0 + at((i, -1))) / (h[i] * h[i])
        for j in range(i):
            v = (at((i, 1), (j, 1)) - at((i, 1), (j, -1)) - at((i, -1), (j, 1)) + at((i, -1), (j, -1)))
            H[i, j] = H[j, i] = v / (4.0 * h[i] * h[j])
    return H


class _BudgetExhausted(Exception):
    pass


class _Objective:
    """-total_loglik on the unconstrained scale, with warm starts and a call counter."""

    def __init__(self, data, spec, config, budget=None):
        self.data, self.spec, self.config = data, spec, config
        self.cache = WarmStart()
        self.n_calls = 0
        self.budget = budget
        self.last_diag = None
        self.best_x, self.best_f = None, math.inf

    def patterns(self, x):
        """Per-pattern log f~ at x; every call counts as one likelihood evaluation."""
        if self.budget is not None and self.n_calls >= self.budget:
            raise _BudgetExhausted
        self.n_calls += 1
        theta = self.spec.unpack(x)
        values, _, diag = pattern_logliks(self.data, theta, self.spec, self.config, self.cache)
        self.last_diag = diag
        return values

    def __call__(self, x):
        try:
            values = self.patterns(x)
        except (ModeFailure, NumericDomainError):
            return math.inf
        if not np.all(np.isfinite(values)):
            return math.inf
        f = -math.fsum(self.data.counts * values)
        if f < self.best_f:
            self.best_x, self.best_f = np.array(x, dtype=float), f
        return f


def _bfgs(obj, x0, opts):
    """Minimize obj from x0.  Returns (x, f, g, converged, iterations, message)."""
    x = np.asarray(x0, dtype=float).copy()
    f = obj(x)
    if not math.isfinite(f):
        return x, f, np.full_like(x, np.nan), False, 0, "objective not finite at start"
    try:
        g = numerical_gradient(obj, x)
    except ArithmeticError as exc:
        return x, f, np.full_like(x, np.nan), False, 0, f"gradient not computable: {exc}"
    if np.max(np.abs(g)) < opts.grad_tol:
        return x, f, g, True, 0, "gradient below tolerance at start"
    Hinv = np.eye(x.size)
    it = 0
    while True:
        it += 1
        d = -Hinv @ g
        slope = g @ d
        if not slope < 0:
            Hinv = np.eye(x.size)
            d = -g
            slope = g @ d
        big = np.max(np.abs(d))
        if big > opts.max_step:
            d *= opts.max_step / big
            slope = g @ d
        t = 1.0
        for _ in range(opts.max_backtracks):
            f_new = obj(x + t * d)
            if math.isfinite(f_new) and f_new <= f + 1e-4 * t * slope:
                break
            # safeguarded quadratic interpolation
            if math.isfinite(f_new):
                denom = 2.0 * (f_new - f - slope * t)
                t_q = -slope * t * t / denom if denom > 0 else 0.5 * t
                t = min(0.5 * t, max(0.1 * t, t_q))
            else:
                t *= 0.5
        else:
            if np.max(np.abs(g)) < opts.grad_tol:
                return x, f, g, True, it, "line search stalled at a stationary point"
            return x, f, g, False, it, "line search failed"
        x_new = x + t * d
        try:
            g_new = numerical_gradient(obj, x_new)
        except ArithmeticError as exc:
            return x_new, f_new, np.full_like(x, np.nan), False, it, f"gradient not computable: {exc}"
        s, y = x_new - x, g_new - g
        rel = abs(f_new - f) / max(1.0, abs(f))
        x, f, g = x_new, f_new, g_new
        if rel < opts.loglik_tol and np.max(np.abs(g)) < opts.grad_tol:
            return x, f, g, True, it, "converged"
        sy = s @ y
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            if it == 1:
                Hinv = (sy / (y @ y)) * np.eye(x.size)
            rho = 1.0 / sy
            V = np.eye(x.size) - rho * np.outer(s, y)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)


def _sandwich_from(obj, x, n):
    """H, U and the sandwich covariance on the unconstrained scale."""
    counts = obj.data.counts
    f0 = obj(x)
    H = numerical_hessian(obj, x, f0) / n
    H = 0.5 * (H + H.T)
    G = numerical_jacobian(obj.patterns, x)
    U = (G.T * counts) @ G / n
    U = 0.5 * (U + U.T)
    if not np.all(np.isfinite(H)):
        raise SingularHessianError("Hessian has non-finite entries", direction=np.full(x.size, np.nan),
                                   eigenvalue=math.nan)
    evals, evecs = np.linalg.eigh(H)
    # finite-difference noise in H is about sqrt(eps) |f| / n
    if evals[0] <= SINGULAR_TOL * max(1.0, abs(f0) / n):
        k = int(np.argmin(evals)) if np.all(np.isfinite(evals)) else 0
        raise SingularHessianError(f"Hessian is singular or indefinite (smallest eigenvalue {evals[0]:.3g})",
                                   direction=evecs[:, k], eigenvalue=evals[0])
    Hi = np.linalg.inv(H)
    V = Hi @ U @ Hi.T / n
    return H, U, 0.5 * (V + V.T)


def _describe_direction(spec, vec):
    order = np.argsort(-np.abs(vec))[:3]
    return ", ".join(f"{spec.names[i]} ({vec[i]:+.2f})" for i in order)


def sandwich_se(data, theta_hat, spec, config, return_all=False):
    """Sandwich standard errors H^-1 U H^-T / n, mapped to the constrained scale.

    H is the numerical Hessian of -loglik/n and U the average outer product
    of per-subject numerical scores, both on the unconstrained scale; the
    delta method through the transform Jacobian gives constrained SEs.
    """
    data = _as_data(data)
    obj = _Objective(data, spec, config)
    x = spec.pack(theta_hat)
    try:
        H, U, V = _sandwich_from(obj, x, data.n)
    except SingularHessianError as exc:
        raise SingularHessianError(f"{exc}; direction: {_describe_direction(spec, exc.direction)}",
                                   exc.direction, exc.eigenvalue) from None
    J = spec.transform_jacobian(x)
    Vc = J @ V @ J.T
    se = np.sqrt(np.diag(Vc))
    if return_all:
        return se, {"H": H, "U": U, "V_unconstrained": V, "V": Vc, "se_unconstrained": np.sqrt(np.diag(V))}
    return se


def fit(data, spec, config, start, options=FitOptions()):
    """BFGS on -total_loglik over the unconstrained parameters.

    Never raises for non-convergence: the result carries ``converged``.
    A fit counts as converged when BFGS meets both the log-likelihood and
    gradient tolerances within ``max_feval`` objective calls and the
    numerical Hessian there is positive definite.  ``n_feval`` counts the
    optimizer's objective calls; the calls spent on the Hessian and scores
    at the optimum are reported separately in ``n_feval_se``.
    """
    data = _as_data(data)
    spec.validate(start)
    config.check(spec.q)
    t0 = time.perf_counter()
    obj = _Objective(data, spec, config, budget=options.max_feval)
    x0 = spec.pack(start)
    try:
        x, f, g, ok, iters, msg = _bfgs(obj, x0, options)
        gnorm = float(np.max(np.abs(g)))
    except _BudgetExhausted:
        ok, iters, msg = False, -1, "maximum function evaluations reached"
        x = obj.best_x if obj.best_x is not None else x0
        f, gnorm = obj.best_f, math.nan
    n_feval = obj.n_calls
    obj.budget = None

    se = np.full(spec.n_params, np.nan)
    hess_pd = False
    if ok:
        try:
            _, _, V = _sandwich_from(obj, x, data.n)
            hess_pd = True
            if options.compute_se:
                J = spec.transform_jacobian(x)
                se = np.sqrt(np.diag(J @ V @ J.T))
        except ArithmeticError as exc:
            msg = f"optimizer stopped ({msg}) but the Hessian there is not positive definite: {exc}"
    # diagnostics (bracket fallbacks) belong to the returned point
    f_check = obj(x)
    if not math.isfinite(f):
        f = f_check
    return FitResult(
        names=spec.names, theta_hat=spec.unpack(x), standard_errors=se, loglik=-f,
        converged=bool(ok and hess_pd), n_feval=n_feval, wall_time_s=time.perf_counter() - t0,
        bracket_fallback_count=int(obj.last_diag.bracket_fallbacks) if obj.last_diag else 0,
        gradient_norm=gnorm, iterations=iters, n_feval_se=obj.n_calls - n_feval, hessian_pd=hess_pd,
        message=msg, s=config.s, n_q=config.n_q if config.s > 0 else 0, x_hat=np.array(x),
    )
