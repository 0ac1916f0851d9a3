"""Cut-HDMR approximation of the marginal likelihood.

For each subject the integrand exp(L(b)) is written as the Laplace factor
(2 pi)^{q/2} |Sigma|^{1/2} exp(L(b_hat)) times E_phi[r(b*)], where
b = C b* + b_hat and r is the ratio of the integrand to its Gaussian
approximation.  The expectation is replaced by the order-s Cut-HDMR
expansion of r, whose components are integrated with Gauss-Hermite rules:

    B = sum_{i=0}^{s} c(q, s, i) sum_{|K| = i} pi^{-i/2} sum_t w*_t r-terms

with c(q, s, i) = (-1)^{s-i} binom(q-i-1, s-i).  s=0 gives B=1 (Laplace),
s=q leaves only the full tensor grid (adaptive Gauss-Hermite).
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InfeasibleConfig, ModeFailure, NumericDomainError
from .inner import GRAD_TOL, MAX_ITER, ModeBatch, find_modes, joint_logdensity
from .model import LOG_2PI, ResponseData
from .quadrature import gh_rule, subset_grid, subsets

SQRT2 = math.sqrt(2.0)
LOG_PI = math.log(math.pi)
DEFAULT_MAX_POINTS = 100_000


@dataclass(frozen=True)
class ApproxConfig:
    """Truncation order ``s``, nodes per dimension ``n_q``.

    ``fallback`` decides what happens when the bracket is not positive:
    ``"laplace"`` substitutes B=1 and flags the subject, ``"strict"``
    raises.  Configurations needing more than ``max_points`` integrand
    evaluations per subject are refused as infeasible.
    """

    s: int = 0
    n_q: int = 5
    fallback: str = "laplace"
    max_points: int = DEFAULT_MAX_POINTS
    mode_tol: float = GRAD_TOL
    mode_max_iter: int = MAX_ITER

    def __post_init__(self):
        if self.s < 0:
            raise ValueError("truncation order s must be nonnegative")
        if self.s >= 1 and not 1 <= self.n_q:
            raise ValueError("n_q must be at least 1 when s >= 1")
        if self.fallback not in ("laplace", "strict"):
            raise ValueError(f"fallback must be 'laplace' or 'strict', got {self.fallback!r}")

    def check(self, q):
        if self.s > q:
            raise ValueError(f"truncation order s={self.s} exceeds latent dimension q={q}")
        need = eval_count(q, self.s, self.n_q)
        if need > self.max_points:
            raise InfeasibleConfig(
                f"s={self.s}, n_q={self.n_q} needs {need} integrand evaluations per subject for q={q}; "
                f"limit is {self.max_points}")

    @property
    def label(self):
        if self.s == 0:
            return "Laplace"
        return f"s={self.s},nq={self.n_q}"


@dataclass(frozen=True)
class SubjectLogLik:
    value: float
    bracket_nonpositive: bool
    eval_count: int


@dataclass
class LoglikDiagnostics:
    eval_count: int = 0
    bracket_fallbacks: int = 0
    newton_iterations: int = 0


def _binom(m, k):
    if k < 0:
        return 0
    if k == 0:
        return 1
    if m < 0:
        raise ValueError(f"binomial with negative top {m} and k={k} is not used here")
    return math.comb(m, k)


def hdmr_coefficient(q, s, i):
    """(-1)^(s-i) * binom(q-i-1, s-i)."""
    if not 0 <= i <= s <= q:
        raise ValueError(f"need 0 <= i <= s <= q, got q={q}, s={s}, i={i}")
    return (-1) ** (s - i) * _binom(q - i - 1, s - i)


def eval_count(q, s, n_q):
    """Integrand evaluations per subject: n_q^q for s=q, else sum_j binom(q, j) n_q^j."""
    if not 0 <= s <= q:
        raise ValueError(f"need 0 <= s <= q, got s={s}, q={q}")
    if s == q and q > 0:
        return n_q ** q
    return sum(math.comb(q, s - i) * n_q ** (s - i) for i in range(s + 1))


@dataclass(frozen=True)
class _Layout:
    constant: int           # coefficient of the i=0 term
    coefs: tuple            # per block
    orders: tuple           # block subset size i
    starts: np.ndarray      # block offsets into points
    points: np.ndarray      # (M, q) embedded GH nodes (unscaled)
    log_wprod: np.ndarray   # (M,) log products of modified weights
    evals: int


@lru_cache(maxsize=64)
def _layout(q, s, n_q):
    constant = (-1) ** s * _binom(q - 1, s)
    coefs, orders, pts, logw, starts = [], [], [], [], []
    offset = 0
    if s >= 1:
        rule = gh_rule(n_q)
        for i in range(1, s + 1):
            c = hdmr_coefficient(q, s, i)
            if c == 0:
                continue
            for sub in subsets(q, i):
                coords, lw = subset_grid(rule, q, sub)
                coefs.append(c)
                orders.append(i)
                starts.append(offset)
                pts.append(coords)
                logw.append(lw)
                offset += coords.shape[0]
    points = np.concatenate(pts) if pts else np.zeros((0, q))
    log_wprod = np.concatenate(logw) if logw else np.zeros(0)
    evals = offset + (1 if constant != 0 else 0)
    for a in (points, log_wprod):
        a.setflags(write=False)
    return _Layout(constant, tuple(coefs), tuple(orders), np.array(starts, dtype=int), points, log_wprod, evals)


def _combine(layout, block_sums, anchor=1.0):
    """Signed sum c0 r(0) + sum_k coef_k pi^{-i_k/2} S_k, Neumaier-compensated across blocks.

    block_sums has shape (n, K); returns shape (n,).  In the likelihood the
    ratio at the cut point is exactly 1, hence the default ``anchor``.
    """
    n = block_sums.shape[0]
    total = np.full(n, float(layout.constant) * anchor)
    comp = np.zeros(n)
    for k, (c, i) in enumerate(zip(layout.coefs, layout.orders)):
        term = c * math.exp(-0.5 * i * LOG_PI) * block_sums[:, k]
        t = total + term
        big = np.abs(total) >= np.abs(term)
        comp += np.where(big, (total - t) + term, (term - t) + total)
        total = t
    return total + comp


def _block_sums(layout, terms):
    if layout.starts.size == 0:
        return np.zeros((terms.shape[0], 0))
    return np.add.reduceat(terms, layout.starts, axis=1)


def bracket_terms(st, Y, modes, layout, chunk=None):
    """Per-block sums of exp(L(b_t) - L(b_hat) + log w*) for a batch of subjects."""
    n = Y.shape[0]
    M = layout.points.shape[0]
    if M == 0:
        return np.zeros((n, 0))
    if chunk is None:
        chunk = max(1, int(4_000_000 // max(1, M * Y.shape[1])))
    out = np.empty((n, len(layout.coefs)))
    scaled = SQRT2 * layout.points
    for a in range(0, n, chunk):
        sl = slice(a, a + chunk)
        # b_t = b_hat + sqrt(2) C t
        B = modes.modes[sl, None, :] + np.einsum("nkl,ml->nmk", modes.chol[sl], scaled)
        rel = joint_logdensity(st, Y[sl], B) - modes.log_density[sl, None] + layout.log_wprod
        out[sl] = _block_sums(layout, np.exp(rel))
    return out


def _assemble(modes, bracket, q, config):
    """log f~ = (q/2) log 2pi + (1/2) log|Sigma| + L(b_hat) + log B, with the fallback policy."""
    laplace = 0.5 * q * LOG_2PI + 0.5 * modes.log_det_sigma + modes.log_density
    bad = ~(bracket > 0) | ~np.isfinite(bracket)
    if bad.any() and config.fallback == "strict":
        raise NumericDomainError(f"Cut-HDMR bracket is not positive for {int(bad.sum())} subject(s)")
    safe = np.where(bad, 1.0, bracket)
    return laplace + np.log(safe), bad


def marginal_loglik_batch(st, Y, modes, config, q):
    layout = _layout(q, config.s, config.n_q)
    if config.s == 0:
        bracket = np.ones(Y.shape[0])
    else:
        bracket = _combine(layout, bracket_terms(st, Y, modes, layout))
    values, flags = _assemble(modes, bracket, q, config)
    return values, flags, layout.evals


def marginal_loglik_subject(y, theta, spec, config, mode):
    """Approximate log f(y) for one subject given its :class:`SubjectMode`."""
    config.check(spec.q)
    st = spec.structure(theta)
    y = np.asarray(y, dtype=float)[None, :]
    modes = ModeBatch(np.asarray(mode.mode)[None, :], np.array([mode.log_density_at_mode]),
                      np.asarray(mode.chol_factor)[None, :, :], np.array([mode.log_det_sigma]),
                      np.array([mode.newton_iterations]))
    values, flags, evals = marginal_loglik_batch(st, y, modes, config, spec.q)
    return SubjectLogLik(float(values[0]), bool(flags[0]), evals)


def cut_hdmr_expectation(ratio, q, s, n_q):
    """E[r(x)] for x ~ N(0, I_q) by the order-s Cut-HDMR rule.

    ``ratio`` maps an (M, q) array of points to M values.  This is the
    same expansion the likelihood uses, stripped of the model.
    """
    layout = _layout(q, s, n_q)
    anchor = float(np.asarray(ratio(np.zeros((1, q))), dtype=float)[0])
    if layout.points.shape[0] == 0:
        return float(layout.constant) * anchor
    x = SQRT2 * layout.points
    w = np.exp(layout.log_wprod - np.sum(layout.points ** 2, axis=1))
    sums = _block_sums(layout, (w * np.asarray(ratio(x), dtype=float))[None, :])
    return float(_combine(layout, sums, anchor)[0])


class WarmStart:
    """Last modes found for each response pattern of one dataset."""

    def __init__(self):
        self.modes = None

    def start_for(self, n_patterns):
        if self.modes is not None and self.modes.shape[0] == n_patterns:
            return self.modes
        return None


def _as_data(data):
    return data if isinstance(data, ResponseData) else ResponseData(data)


def pattern_logliks(data, theta, spec, config, warm_cache=None, structure=None):
    """Approximate log f~ for every distinct response pattern of ``data``.

    Returns (values, flags, diagnostics) with values aligned with
    ``data.patterns``.
    """
    data = _as_data(data)
    if data.n_columns != spec.n_responses:
        raise ValueError(f"data has {data.n_columns} columns, model expects {spec.n_responses}")
    config.check(spec.q)
    st = spec.structure(theta) if structure is None else structure
    start = None if warm_cache is None else warm_cache.start_for(data.patterns.shape[0])
    modes = find_modes(st, data.patterns, start, tol=config.mode_tol, max_iter=config.mode_max_iter)
    values, flags, evals = marginal_loglik_batch(st, data.patterns, modes, config, spec.q)
    if warm_cache is not None:
        warm_cache.modes = modes.modes.copy()
    diag = LoglikDiagnostics(
        eval_count=int(evals * data.n),
        bracket_fallbacks=int(np.sum(data.counts[flags])),
        newton_iterations=int(np.sum(modes.iterations)),
    )
    return values, flags, diag


def total_loglik(data, theta, spec, config, warm_cache=None):
    """Sum of approximate log f~(y_l) over subjects; returns (value, diagnostics).

    Patterns are summed in sorted order with exact rounding, so the value
    does not depend on the order of the rows.
    """
    data = _as_data(data)
    values, _, diag = pattern_logliks(data, theta, spec, config, warm_cache)
    return math.fsum(data.counts * values), diag


__all__ = [
    "ApproxConfig", "SubjectLogLik", "LoglikDiagnostics", "WarmStart", "hdmr_coefficient", "eval_count",
    "marginal_loglik_subject", "marginal_loglik_batch", "pattern_logliks", "total_loglik",
    "cut_hdmr_expectation", "ModeFailure",
]
