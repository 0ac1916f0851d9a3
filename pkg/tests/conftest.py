import numpy as np
import pytest
from hypothesis import settings

from drmlvm import ModelSpec

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")

SCEN1_PATTERN = [["*", 0], ["*", 0], [0, "*"], [0, "*"]]


def scenario1_spec():
    return ModelSpec.factor(SCEN1_PATTERN, intercepts=[0, 0, 0, 0])


def scenario1_truth(spec=None):
    spec = spec or scenario1_spec()
    return spec.make_theta([], [2.697, 0.933, 1.232, 1.634], [0.469])


def random_factor_problem(rng, q, p=None, free_intercepts=True):
    """Simple-structure model with q factors and random parameters."""
    p = p or 2 * q
    pattern = [[0] * q for _ in range(p)]
    for j in range(p):
        pattern[j][j * q // p] = "*"
    spec = ModelSpec.factor(pattern, None if free_intercepts else [0] * p)
    icpt = rng.uniform(-1, 1, spec.n_intercepts)
    load = rng.uniform(0.3, 2.5, spec.n_loadings) * rng.choice([-1, 1], spec.n_loadings)
    # correlations from a random unit-row Cholesky factor stay positive definite
    L = np.tril(rng.normal(size=(q, q)))
    L /= np.linalg.norm(L, axis=1, keepdims=True)
    psi = L @ L.T
    cov = [psi[a, b] * 0.9 for a in range(q) for b in range(a + 1, q)]
    theta = spec.make_theta(icpt, load, cov)
    y = rng.integers(0, 2, spec.n_responses)
    return spec, theta, y


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
