"""Gauss-Hermite rules and the embedded node layouts of the Cut-HDMR sums."""

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.linalg import eigh_tridiagonal

MAX_ORDER = 64


@dataclass(frozen=True)
class GaussHermiteRule:
    """n-point rule for the weight function exp(-x**2).

    Nodes are ascending and weights paired positionally.  ``log_modified``
    holds log(w * exp(x**2)), computed without forming exp(x**2).
    """

    order: int
    nodes: np.ndarray
    weights: np.ndarray
    log_modified: np.ndarray = field(repr=False)

    @property
    def modified_weights(self):
        return np.exp(self.log_modified)


def _orthonormal_hermite_functions(x, n):
    """Rows k=0..n of psi_k(x) = p_k(x) exp(-x^2/2), p_k orthonormal for exp(-x^2)."""
    x = np.asarray(x, dtype=float)
    psi = np.empty((n + 1,) + x.shape)
    psi[0] = np.pi ** -0.25 * np.exp(-0.5 * x * x)
    if n >= 1:
        psi[1] = np.sqrt(2.0) * x * psi[0]
    for k in range(1, n):
        psi[k + 1] = np.sqrt(2.0 / (k + 1)) * x * psi[k] - np.sqrt(k / (k + 1)) * psi[k - 1]
    return psi


def gh_rule(n_q):
    """Golub-Welsch rule with Newton-polished nodes.

    Eigenvalues of the Jacobi matrix of the Hermite recurrence give the
    nodes; weights come from the Christoffel function so that tiny tail
    weights keep full relative accuracy.
    """
    if isinstance(n_q, bool) or int(n_q) != n_q or not 1 <= n_q <= MAX_ORDER:
        raise ValueError(f"Gauss-Hermite order must be an integer in [1, {MAX_ORDER}], got {n_q!r}")
    n = int(n_q)
    if n == 1:
        return GaussHermiteRule(1, np.zeros(1), np.array([np.sqrt(np.pi)]), np.array([0.5 * np.log(np.pi)]))

    offdiag = np.sqrt(np.arange(1, n) / 2.0)
    x = eigh_tridiagonal(np.zeros(n), offdiag, eigvals_only=True)
    for _ in range(2):
        psi = _orthonormal_hermite_functions(x, n)
        # p_n' = sqrt(2n) p_{n-1}
        x = x - psi[n] / (np.sqrt(2.0 * n) * psi[n - 1])
    x = 0.5 * (x - x[::-1])
    if n % 2:
        x[n // 2] = 0.0

    psi = _orthonormal_hermite_functions(x, n - 1)
    log_modified = -np.log(np.sum(psi * psi, axis=0))
    log_modified = 0.5 * (log_modified + log_modified[::-1])
    weights = np.exp(log_modified - x * x)
    x.setflags(write=False)
    weights.setflags(write=False)
    log_modified.setflags(write=False)
    return GaussHermiteRule(n, x, weights, log_modified)


@dataclass(frozen=True)
class EmbeddedPoint:
    coordinates: tuple
    weight_product: float


def _check_subset(q, subset):
    subset = tuple(int(k) for k in subset)
    if not 1 <= len(subset) <= q:
        raise ValueError(f"subset size must lie in [1, {q}], got {len(subset)}")
    if len(set(subset)) != len(subset):
        raise ValueError(f"duplicate index in subset {subset}")
    if any(k < 1 or k > q for k in subset):
        raise ValueError(f"subset indices must lie in [1, {q}], got {subset}")
    if list(subset) != sorted(subset):
        raise ValueError(f"subset must be ascending, got {subset}")
    return subset


def subset_grid(rule, q, subset):
    """Array form of :func:`subset_points`.

    Returns ``(coords, log_wprod)`` with ``coords`` of shape (n_q**i, q)
    and ``log_wprod`` the log of the product of modified weights.  Tuples
    run in C order over the subset coordinates.  ``subset`` is 1-based.
    """
    subset = _check_subset(q, subset)
    i = len(subset)
    idx = np.indices((rule.order,) * i).reshape(i, -1).T
    coords = np.zeros((idx.shape[0], q))
    cols = [k - 1 for k in subset]
    coords[:, cols] = rule.nodes[idx]
    log_wprod = rule.log_modified[idx].sum(axis=1)
    return coords, log_wprod


def subset_points(rule, q, subset):
    """Tensor grid of ``rule`` placed on the 1-based coordinates in ``subset``."""
    coords, log_wprod = subset_grid(rule, q, subset)
    wprod = np.exp(log_wprod)
    return [EmbeddedPoint(tuple(c), float(w)) for c, w in zip(coords, wprod)]


def subsets(q, i):
    """Lexicographic 1-based index combinations of size i."""
    return list(combinations(range(1, q + 1), i))
