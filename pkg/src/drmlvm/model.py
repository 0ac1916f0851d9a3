"""Binary-response GLLVM: measurement part, structural part, parameter maps.

Two structural families are supported:

``correlation``
    Confirmatory factor model.  Psi is a correlation matrix with free
    off-diagonal entries; loadings follow a pattern of fixed and free cells.
``longitudinal``
    p items observed at T occasions.  The latent vector is
    (z_1..z_T, u_1..u_p): a non-stationary AR(1) factor with Var(z_1) =
    sigma1_sq and unit innovations, plus one random effect per item.
    Response columns are item-major (column ``j*T + t``).  Item loadings are
    equal over time and the first is fixed to 1.
"""

import math
import warnings
from collections import namedtuple
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import NumericDomainError

FREE = "*"
LOG_2PI = math.log(2.0 * math.pi)

Structure = namedtuple("Structure", "intercepts loadings psi psi_chol psi_inv psi_logdet inv_chol_t")


def _is_free(cell):
    if isinstance(cell, str):
        if cell.strip() in (FREE, "free"):
            return True
        raise ValueError(f"pattern cell must be a number or '{FREE}', got {cell!r}")
    return cell is None or (isinstance(cell, float) and math.isnan(cell))


@dataclass(frozen=True)
class StartBox:
    """Uniform ranges for random starting values."""

    loadings: tuple = (0.5, 2.0)
    correlations: tuple = (0.0, 0.3)
    intercepts: tuple = (-0.5, 0.5)
    phi: tuple = (0.5, 1.0)
    variances: tuple = (0.5, 2.0)


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Free parameters on the constrained scale.

    ``cov`` is family specific: the upper-triangle correlations
    (psi_12, psi_13, ..., psi_{q-1,q}) for the correlation family, and
    (phi, sigma1_sq, sigma_u1_sq, ..., sigma_up_sq) for the longitudinal one.
    """

    intercepts: np.ndarray
    loadings: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        for name in ("intercepts", "loadings", "cov"):
            arr = np.array(getattr(self, name), dtype=float).ravel()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def flat(self):
        return np.concatenate([self.intercepts, self.loadings, self.cov])

    def __eq__(self, other):
        return isinstance(other, ParameterVector) and np.array_equal(self.flat, other.flat) and all(
            len(getattr(self, k)) == len(getattr(other, k)) for k in ("intercepts", "loadings", "cov"))

    def __repr__(self):
        return (f"ParameterVector(intercepts={self.intercepts.tolist()}, "
                f"loadings={self.loadings.tolist()}, cov={self.cov.tolist()})")


class ModelSpec:
    """Shape of a GLLVM: items, latent dimension, which entries are free.

    Use :meth:`factor` or :meth:`longitudinal` rather than the constructor.
    Loadings and intercepts are stored as a fixed part plus 0/1 design
    arrays, one per free parameter, so equality constraints (loadings equal
    over time) are just designs with several ones.
    """

    def __init__(self, family, p, q, T, loading_fixed, loading_design, intercept_fixed,
                 intercept_design, names):
        self.family = family
        self.p = int(p)
        self.q = int(q)
        self.T = int(T)
        self.loading_fixed = np.asarray(loading_fixed, dtype=float)
        self.loading_design = np.asarray(loading_design, dtype=float).reshape(-1, self.n_responses, self.q)
        self.intercept_fixed = np.asarray(intercept_fixed, dtype=float)
        self.intercept_design = np.asarray(intercept_design, dtype=float).reshape(-1, self.n_responses)
        self.names = tuple(names)
        self.source = None  # constructor arguments, set by the factory methods
        for arr in (self.loading_fixed, self.loading_design, self.intercept_fixed, self.intercept_design):
            arr.setflags(write=False)
        if len(self.names) != self.n_params:
            raise ValueError("parameter name count does not match the free-parameter count")

    # -- construction ------------------------------------------------------

    @classmethod
    def factor(cls, pattern, intercepts=None):
        """Correlation-family factor model from a p x q loading pattern.

        Cells are either a number (fixed loading) or ``"*"``/NaN (free).
        ``intercepts`` is a length-p list in the same convention; default
        all free.
        """
        rows = [list(r) for r in pattern]
        p = len(rows)
        if p == 0:
            raise ValueError("empty loading pattern")
        q = len(rows[0])
        if q == 0 or any(len(r) != q for r in rows):
            raise ValueError("loading pattern rows must all have the same nonzero length")
        fixed = np.zeros((p, q))
        design = []
        load_names = []
        # free loadings ordered factor-major, matching the alpha_{kj} labelling
        for k in range(q):
            for j in range(p):
                if _is_free(rows[j][k]):
                    d = np.zeros((p, q))
                    d[j, k] = 1.0
                    design.append(d)
                    load_names.append(_pair_name("alpha", k + 1, j + 1))
        for j in range(p):
            for k in range(q):
                if not _is_free(rows[j][k]):
                    fixed[j, k] = float(rows[j][k])
        n_fixed_cells = p * q - len(design)
        if q + n_fixed_cells < q * q:
            raise ValueError(
                f"model not identified: {q + n_fixed_cells} constraints (unit variances plus fixed "
                f"loadings) but at least q^2 = {q * q} are required")
        icpt_fixed, icpt_design, icpt_names = _intercept_layout(
            [FREE] * p if intercepts is None else list(intercepts), p, 1)
        cov_names = [_pair_name("psi", a + 1, b + 1) for a, b in _upper_pairs(q)]
        spec = cls("correlation", p, q, 1, fixed, np.array(design).reshape(-1, p, q), icpt_fixed,
                   icpt_design, icpt_names + load_names + cov_names)
        spec.source = {"pattern": [[FREE if _is_free(c) else float(c) for c in r] for r in rows],
                       "intercepts": None if intercepts is None else [
                           FREE if _is_free(c) else float(c) for c in intercepts]}
        return spec

    @classmethod
    def longitudinal(cls, p, T, intercepts="equal"):
        """Longitudinal AR(1) model, q = p + T.

        ``intercepts`` is ``"equal"`` (one free intercept per item, shared
        over time), ``"free"`` (one per item and occasion) or a length-p
        list of numbers/``"*"`` shared over time.
        """
        p, T = int(p), int(T)
        if p < 1 or T < 1:
            raise ValueError("longitudinal model needs p >= 1 and T >= 1")
        q = p + T
        P = p * T
        fixed = np.zeros((P, q))
        for j in range(p):
            for t in range(T):
                fixed[j * T + t, T + j] = 1.0
        for t in range(T):
            fixed[t, t] = 1.0
        design = []
        load_names = []
        for j in range(1, p):
            d = np.zeros((P, q))
            for t in range(T):
                d[j * T + t, t] = 1.0
            design.append(d)
            load_names.append(f"alpha{j + 1}")
        if isinstance(intercepts, str) and intercepts == "free":
            icpt_fixed, icpt_design, icpt_names = np.zeros(P), np.eye(P), [
                f"alpha0_{j + 1}_{t + 1}" for j in range(p) for t in range(T)]
        else:
            cells = [FREE] * p if isinstance(intercepts, str) and intercepts == "equal" else list(intercepts)
            if isinstance(intercepts, str) and intercepts != "equal":
                raise ValueError(f"unknown intercept layout {intercepts!r}")
            icpt_fixed, icpt_design, icpt_names = _intercept_layout(cells, p, T)
        cov_names = ["phi", "sigma1_sq"] + [f"sigma_u{j + 1}_sq" for j in range(p)]
        spec = cls("longitudinal", p, q, T, fixed, np.array(design).reshape(-1, P, q), icpt_fixed,
                   icpt_design, icpt_names + load_names + cov_names)
        spec.source = {"p": p, "T": T, "intercepts": intercepts if isinstance(intercepts, str) else [
            FREE if _is_free(c) else float(c) for c in intercepts]}
        return spec

    # -- sizes ------------------------------------------------------------

    @property
    def n_responses(self):
        return self.p * self.T

    @property
    def n_intercepts(self):
        return self.intercept_design.shape[0]

    @property
    def n_loadings(self):
        return self.loading_design.shape[0]

    @property
    def n_cov(self):
        if self.family == "correlation":
            return self.q * (self.q - 1) // 2
        return 2 + self.p

    @property
    def n_params(self):
        return self.n_intercepts + self.n_loadings + self.n_cov

    # -- parameter vectors ----------------------------------------------------

    def from_flat(self, values):
        v = np.asarray(values, dtype=float).ravel()
        if v.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {v.size}")
        a, b = self.n_intercepts, self.n_intercepts + self.n_loadings
        return ParameterVector(v[:a], v[a:b], v[b:])

    def make_theta(self, intercepts=(), loadings=(), cov=()):
        theta = ParameterVector(intercepts, loadings, cov)
        self.from_flat(theta.flat)
        if (theta.intercepts.size, theta.loadings.size, theta.cov.size) != (
                self.n_intercepts, self.n_loadings, self.n_cov):
            raise ValueError("parameter block sizes do not match the model")
        return theta

    def intercept_vector(self, theta):
        return self.intercept_fixed + theta.intercepts @ self.intercept_design

    def loading_matrix(self, theta):
        return self.loading_fixed + np.tensordot(theta.loadings, self.loading_design, axes=1)

    def psi(self, theta):
        if self.family == "correlation":
            psi = np.eye(self.q)
            for (a, b), r in zip(_upper_pairs(self.q), theta.cov):
                psi[a, b] = psi[b, a] = r
            return psi
        phi, s1 = theta.cov[0], theta.cov[1]
        return covariance_longitudinal(phi, s1, theta.cov[2:], self.T)

    def structure(self, theta):
        """Everything the likelihood needs from theta, Psi already factored."""
        psi = self.psi(theta)
        chol = _cholesky(psi, "Psi")
        inv_chol = np.linalg.inv(chol)
        psi_inv = inv_chol.T @ inv_chol
        psi_inv = 0.5 * (psi_inv + psi_inv.T)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        return Structure(self.intercept_vector(theta), self.loading_matrix(theta), psi, chol, psi_inv, logdet,
                         np.ascontiguousarray(inv_chol.T))

    def validate(self, theta):
        self.make_theta(theta.intercepts, theta.loadings, theta.cov)
        if self.family == "longitudinal" and np.any(theta.cov[1:] <= 0):
            raise ValueError("longitudinal variances must be positive")
        _cholesky(self.psi(theta), "Psi")

    # -- unconstrained parameterization ---------------------------------------

    def pack(self, theta):
        """Constrained theta -> unconstrained vector in R^d."""
        if self.family == "correlation":
            cov = _corr_to_unconstrained(self.psi(theta))
        else:
            if np.any(theta.cov[1:] <= 0):
                raise ValueError("longitudinal variances must be positive")
            cov = np.concatenate([[theta.cov[0]], np.log(theta.cov[1:])])
        return np.concatenate([theta.intercepts, theta.loadings, cov])

    def unpack(self, x):
        """Unconstrained vector -> valid theta; never fails for finite x."""
        x = np.asarray(x, dtype=float).ravel()
        if x.size != self.n_params:
            raise ValueError(f"expected {self.n_params} unconstrained values, got {x.size}")
        k = self.n_intercepts + self.n_loadings
        if self.family == "correlation":
            cov = _unconstrained_to_corr(x[k:], self.q)
        else:
            cov = np.concatenate([[x[k]], np.exp(x[k + 1:])])
        return ParameterVector(x[:self.n_intercepts], x[self.n_intercepts:k], cov)

    def transform_jacobian(self, x):
        """d flat(unpack(x)) / dx.

        Identity and exp blocks are exact; the correlation block uses
        central differences.
        """
        x = np.asarray(x, dtype=float).ravel()
        d = x.size
        k = self.n_intercepts + self.n_loadings
        J = np.zeros((d, d))
        J[:k, :k] = np.eye(k)
        if self.family == "correlation":
            for c in range(k, d):
                h = 1e-6 * max(1.0, abs(x[c]))
                xp, xm = x.copy(), x.copy()
                xp[c] += h
                xm[c] -= h
                J[k:, c] = (_unconstrained_to_corr(xp[k:], self.q)
                            - _unconstrained_to_corr(xm[k:], self.q)) / (2 * h)
        else:
            J[k, k] = 1.0
            J[k + 1:, k + 1:] = np.diag(np.exp(x[k + 1:]))
        return J

    def draw_start(self, rng, box=StartBox()):
        """Random start inside ``box``; draws are made in a fixed order."""
        icpt = rng.uniform(*box.intercepts, size=self.n_intercepts)
        load = rng.uniform(*box.loadings, size=self.n_loadings)
        if self.family == "correlation":
            cov = rng.uniform(*box.correlations, size=self.n_cov)
            # shrink until Psi is positive definite
            for _ in range(60):
                try:
                    np.linalg.cholesky(self.psi(ParameterVector(icpt, load, cov)))
                    break
                except np.linalg.LinAlgError:
                    cov = 0.5 * cov
        else:
            cov = np.concatenate([rng.uniform(*box.phi, size=1),
                                  rng.uniform(*box.variances, size=1 + self.p)])
        return ParameterVector(icpt, load, cov)

    # -- sign handling ----------------------------------------------------------

    def align_signs(self, theta):
        """Reflect factors whose free loadings are all negative.

        Only columns with no nonzero fixed loading and at least one free
        loading are candidates.  Correlations with a reflected factor flip
        sign.  Longitudinal models are returned unchanged.
        """
        if self.family != "correlation":
            return theta
        loadings = theta.loadings.copy()
        flips = np.ones(self.q)
        for k in range(self.q):
            in_col = [i for i in range(self.n_loadings) if self.loading_design[i][:, k].any()]
            if not in_col or np.any(self.loading_fixed[:, k] != 0):
                continue
            if np.all(loadings[in_col] < 0):
                loadings[in_col] *= -1
                flips[k] = -1
        cov = np.array([r * flips[a] * flips[b] for (a, b), r in zip(_upper_pairs(self.q), theta.cov)])
        return ParameterVector(theta.intercepts, loadings, cov)

    def __repr__(self):
        return f"ModelSpec(family={self.family!r}, p={self.p}, q={self.q}, T={self.T}, params={self.n_params})"


def _pair_name(prefix, a, b):
    return f"{prefix}{a}{b}" if a < 10 and b < 10 else f"{prefix}{a}_{b}"


def _upper_pairs(q):
    return [(a, b) for a in range(q) for b in range(a + 1, q)]


def _intercept_layout(cells, p, T):
    if len(cells) != p:
        raise ValueError(f"expected {p} intercept cells, got {len(cells)}")
    P = p * T
    fixed = np.zeros(P)
    design, names = [], []
    for j, cell in enumerate(cells):
        rows = slice(j * T, (j + 1) * T)
        if _is_free(cell):
            d = np.zeros(P)
            d[rows] = 1.0
            design.append(d)
            names.append(f"alpha0_{j + 1}")
        else:
            fixed[rows] = float(cell)
    return fixed, np.array(design).reshape(-1, P), names


def _cholesky(mat, label):
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise NumericDomainError(f"{label} is not symmetric positive definite") from exc


def _unconstrained_to_corr(x, q):
    """tanh'd canonical partial correlations -> upper-triangle correlations.

    Row l of the Cholesky factor is built with unit norm from the partial
    correlations z_{kl}, k < l, so every x gives an SPD unit-diagonal matrix.
    """
    z = np.tanh(np.asarray(x, dtype=float))
    L = np.zeros((q, q))
    L[0, 0] = 1.0
    pos = {pair: i for i, pair in enumerate(_upper_pairs(q))}
    for l in range(1, q):
        rem = 1.0
        for k in range(l):
            L[l, k] = z[pos[(k, l)]] * math.sqrt(rem)
            rem -= L[l, k] ** 2
        L[l, l] = math.sqrt(max(rem, 0.0))
    psi = L @ L.T
    return np.array([psi[a, b] for a, b in _upper_pairs(q)])


def _corr_to_unconstrained(psi):
    q = psi.shape[0]
    L = _cholesky(psi, "correlation matrix")
    out = []
    for a, b in _upper_pairs(q):
        rem = 1.0 - np.sum(L[b, :a] ** 2)
        out.append(np.arctanh(L[b, a] / math.sqrt(rem)))
    return np.array(out)


# -- densities ---------------------------------------------------------------

def linear_predictor(theta, spec, b):
    """eta = alpha0 + alpha b for a latent vector (or a stack of them)."""
    b = np.asarray(b, dtype=float)
    if b.shape[-1] != spec.q:
        raise ValueError(f"latent vector must have length q={spec.q}, got {b.shape[-1]}")
    return spec.intercept_vector(theta) + b @ spec.loading_matrix(theta).T


def log_measurement(y, eta):
    """sum_j y_j eta_j - log(1 + exp(eta_j)), summed over the last axis."""
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if y.shape[-1] != eta.shape[-1]:
        raise ValueError("y and eta lengths differ")
    return np.sum(y * eta - np.logaddexp(0.0, eta), axis=-1)


def log_structural(b, psi):
    """log N(b; 0, psi)."""
    b = np.asarray(b, dtype=float)
    psi = np.atleast_2d(np.asarray(psi, dtype=float))
    chol = _cholesky(psi, "Psi")
    q = psi.shape[0]
    if b.shape[-1] != q:
        raise ValueError("b length does not match Psi")
    z = np.linalg.solve(chol, b.reshape(-1, q).T).T
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    out = -0.5 * q * LOG_2PI - 0.5 * logdet - 0.5 * np.sum(z * z, axis=-1)
    return out.reshape(b.shape[:-1]) if b.ndim > 1 else float(out[0])


def covariance_longitudinal(phi, sigma1_sq, sigma_u_sq, T):
    """Block-diagonal [Gamma, 0; 0, diag(sigma_u_sq)] of the AR(1) model."""
    T = int(T)
    sigma_u_sq = np.atleast_1d(np.asarray(sigma_u_sq, dtype=float))
    if T < 1:
        raise ValueError("T must be at least 1")
    if not sigma1_sq > 0 or np.any(~(sigma_u_sq > 0)):
        raise ValueError("variances must be positive")
    phi = float(phi)
    gamma = np.empty((T, T))
    for t in range(1, T + 1):
        gamma[t - 1, t - 1] = phi ** (2 * (t - 1)) * sigma1_sq + sum(
            phi ** (2 * (k - 1)) for k in range(1, t))
        for t2 in range(t + 1, T + 1):
            v = phi ** (t + t2 - 2) * sigma1_sq + sum(phi ** (t2 - t + 2 * k) for k in range(0, t - 1))
            gamma[t - 1, t2 - 1] = gamma[t2 - 1, t - 1] = v
    p = sigma_u_sq.size
    psi = np.zeros((T + p, T + p))
    psi[:T, :T] = gamma
    psi[T:, T:] = np.diag(sigma_u_sq)
    return psi


# -- data ------------------------------------------------------------------------

class ResponseData:
    """n x P binary matrix, with its distinct rows and their counts.

    The likelihood only depends on distinct response patterns, so all
    engine code works on ``patterns`` (lexicographically sorted) weighted by
    ``counts``.
    """

    def __init__(self, matrix):
        m = np.asarray(matrix)
        if m.ndim != 2 or m.shape[0] == 0:
            raise ValueError("response matrix must be 2-D with at least one row")
        if not np.all((m == 0) | (m == 1)):
            r, c = np.argwhere((m != 0) & (m != 1))[0]
            raise ValueError(f"non-binary value {m[r, c]!r} at row {r + 1}, column {c + 1}")
        self.matrix = m.astype(np.int8)
        self.matrix.setflags(write=False)
        patterns, inverse, counts = np.unique(self.matrix, axis=0, return_inverse=True, return_counts=True)
        self.patterns = patterns.astype(float)
        self.inverse = inverse.ravel()
        self.counts = counts
        means = self.matrix.mean(axis=0)
        degenerate = np.flatnonzero((means == 0) | (means == 1))
        if degenerate.size:
            warnings.warn(f"items {(degenerate + 1).tolist()} are constant; their parameters are weakly identified",
                          RuntimeWarning, stacklevel=2)

    @property
    def n(self):
        return self.matrix.shape[0]

    @property
    def n_columns(self):
        return self.matrix.shape[1]


def simulate_responses(theta, spec, n, seed):
    """Draw b ~ N(0, Psi), then y_j ~ Bernoulli(expit(eta_j)) given b."""
    rng = np.random.default_rng(seed)
    st = spec.structure(theta)
    b = rng.standard_normal((int(n), spec.q)) @ st.psi_chol.T
    eta = st.intercepts + b @ st.loadings.T
    y = (rng.random(eta.shape) < expit(eta)).astype(np.int8)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return ResponseData(y)
