import json
import math
import os

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import logit

import drmlvm.estimate as estimate
from drmlvm import ApproxConfig, FitOptions, FitResult, ModelSpec, fit, numerical_gradient, sandwich_se
from drmlvm import simulate_responses, total_loglik
from drmlvm.errors import SingularHessianError

from conftest import scenario1_spec, scenario1_truth
from oracles import laplace_loglik

HERE = os.path.dirname(__file__)
H3 = np.finfo(float).eps ** (1 / 3)


def pure_intercept(n_ones, n):
    spec = ModelSpec.factor([[0]], intercepts=["*"])
    y = np.zeros((n, 1), dtype=int)
    y[:n_ones] = 1
    return spec, y


# -- numerical gradient -----------------------------------------------------------

def test_gradient_quadratic():
    g = numerical_gradient(lambda x: float(np.sum(x ** 2)), np.array([1.0, 2.0]))
    np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)


def test_gradient_product():
    g = numerical_gradient(lambda x: float(x[0] * x[1]), np.array([3.0, 5.0]))
    np.testing.assert_allclose(g, [5.0, 3.0], atol=1e-8)


def test_gradient_halves_step_near_wall():
    def f(x):
        return math.inf if x[0] > 1.0 + 1e-6 else float(x[0] ** 2)

    g = numerical_gradient(f, np.array([1.0]))
    assert g[0] == pytest.approx(2.0, rel=1e-6)


def test_gradient_gives_up_after_five_halvings():
    def f(x):
        return math.inf if x[0] > 1.0 + 1e-9 else float(x[0] ** 2)

    with pytest.raises(ArithmeticError):
        numerical_gradient(f, np.array([1.0]))


def test_loglik_gradient_richardson_stable():
    rng = np.random.default_rng(8)
    spec = scenario1_spec()
    data = simulate_responses(scenario1_truth(spec), spec, 500, 3)
    cfg = ApproxConfig(1, 5)
    x = spec.pack(spec.make_theta([], rng.uniform(0.8, 2.0, 4), [0.3]))

    def f(z):
        return total_loglik(data, spec.unpack(z), spec, cfg)[0]

    def central(scale):
        g = np.empty(x.size)
        for k in range(x.size):
            h = scale * H3 * max(1.0, abs(x[k]))
            e = np.zeros(x.size)
            e[k] = h
            g[k] = (f(x + e) - f(x - e)) / (2 * h)
        return g

    g1, g2 = central(1.0), central(0.5)
    np.testing.assert_allclose(g1, g2, rtol=1e-4)
    np.testing.assert_allclose(-numerical_gradient(lambda z: -f(z), x), g1, rtol=1e-9)


# -- fitting ----------------------------------------------------------------------

def test_pure_intercept_mle():
    spec, y = pure_intercept(37, 100)
    res = fit(y, spec, ApproxConfig(0), spec.make_theta([0.4], [], []))
    assert res.converged
    assert res.theta_hat.intercepts[0] == pytest.approx(logit(0.37), abs=1e-6)


def test_pure_intercept_sandwich_se():
    spec, y = pure_intercept(50, 100)
    res = fit(y, spec, ApproxConfig(0), spec.make_theta([0.4], [], []))
    assert res.standard_errors[0] == pytest.approx(math.sqrt(1 / (100 * 0.25)), rel=0.02)
    se = sandwich_se(y, res.theta_hat, spec, ApproxConfig(0))
    assert se[0] == pytest.approx(0.2, rel=0.02)


@pytest.fixture(scope="module")
def scenario1_fit():
    spec, truth = scenario1_spec(), scenario1_truth()
    data = simulate_responses(truth, spec, 500, 21)
    start = spec.draw_start(np.random.default_rng(21))
    return spec, truth, data, fit(data, spec, ApproxConfig(1, 5), start)


def test_fit_beats_truth(scenario1_fit):
    spec, truth, data, res = scenario1_fit
    assert res.converged
    at_truth, _ = total_loglik(data, truth, spec, ApproxConfig(1, 5))
    assert res.loglik >= at_truth
    assert res.gradient_norm < 1e-4 and res.hessian_pd
    assert np.all(res.standard_errors > 0)


def test_fit_result_round_trip(scenario1_fit):
    res = scenario1_fit[3]
    text = json.dumps(res.to_dict())
    back = FitResult.from_dict(json.loads(text))
    assert back.theta_hat == res.theta_hat
    np.testing.assert_array_equal(back.standard_errors, res.standard_errors)
    assert back.to_dict() == res.to_dict()
    assert "wall_time_s" not in res.to_dict(timing=False)


def test_n_feval_counts_every_call(monkeypatch):
    calls = []
    real = estimate.pattern_logliks

    def counting(*args, **kwargs):
        calls.append(1)
        return real(*args, **kwargs)

    monkeypatch.setattr(estimate, "pattern_logliks", counting)
    spec, truth = scenario1_spec(), scenario1_truth()
    data = simulate_responses(truth, spec, 300, 5)
    res = fit(data, spec, ApproxConfig(1, 5), spec.draw_start(np.random.default_rng(5)))
    assert res.n_feval + res.n_feval_se == len(calls)
    assert res.n_feval <= 500


def test_budget_exhaustion_is_clean():
    spec, truth = scenario1_spec(), scenario1_truth()
    data = simulate_responses(truth, spec, 200, 6)
    res = fit(data, spec, ApproxConfig(1, 5), spec.draw_start(np.random.default_rng(6)), FitOptions(max_feval=1))
    assert not res.converged and res.n_feval == 1
    assert np.all(np.isnan(res.standard_errors))
    assert math.isfinite(res.loglik)


def test_permutation_gives_identical_fit():
    spec, truth = scenario1_spec(), scenario1_truth()
    data = simulate_responses(truth, spec, 400, 12)
    start = spec.draw_start(np.random.default_rng(12))
    perm = np.random.default_rng(0).permutation(400)
    a = fit(data, spec, ApproxConfig(2, 5), start)
    b = fit(data.matrix[perm], spec, ApproxConfig(2, 5), start)
    np.testing.assert_allclose(a.theta_hat.flat, b.theta_hat.flat, rtol=0, atol=1e-10)


def test_laplace_fit_matches_direct_laplace_ml():
    spec, truth = scenario1_spec(), scenario1_truth()
    data = simulate_responses(truth, spec, 500, 30)
    start = spec.make_theta([], [1.0, 1.0, 1.0, 1.0], [0.2])
    res = fit(data, spec, ApproxConfig(0), start, FitOptions(grad_tol=1e-6))
    assert res.converged

    def negll(z):
        theta = spec.make_theta([], z[:4], [math.tanh(z[4])])
        return -math.fsum(c * laplace_loglik(y, theta, spec) for y, c in zip(data.patterns, data.counts))

    # forward differences are too coarse for a 1e-6 comparison
    ref = minimize(negll, np.array([1.0, 1.0, 1.0, 1.0, 0.2]), method="BFGS", jac="3-point", options={"gtol": 1e-7})
    direct = np.concatenate([ref.x[:4], [math.tanh(ref.x[4])]])
    np.testing.assert_allclose(res.theta_hat.flat, direct, atol=1e-6)


def test_recovers_truth_at_n2000():
    with open(os.path.join(HERE, "data", "pilot_scenario1.json")) as fh:
        pilot = json.load(fh)
    spec, truth = scenario1_spec(), scenario1_truth()
    data = simulate_responses(truth, spec, 2000, 777)
    res = fit(data, spec, ApproxConfig(1, 7), spec.draw_start(np.random.default_rng(777)))
    assert res.converged
    est = spec.align_signs(res.theta_hat).flat
    assert np.all(np.abs(est - truth.flat) < 3 * np.array(pilot["sd"]))


# -- sandwich --------------------------------------------------------------------

def test_sandwich_parts(scenario1_fit):
    spec, _, data, res = scenario1_fit
    se, parts = sandwich_se(data, res.theta_hat, spec, ApproxConfig(1, 5), return_all=True)
    U = parts["U"]
    np.testing.assert_array_equal(U, U.T)
    assert np.min(np.linalg.eigvalsh(U)) >= -1e-12 * np.max(np.abs(U))
    # loadings have the identity transform, so both scales agree exactly
    np.testing.assert_array_equal(se[:4], parts["se_unconstrained"][:4])
    np.testing.assert_allclose(se, res.standard_errors, rtol=1e-10)


def test_singular_hessian_names_direction():
    # the second factor carries no items, so psi12 does not enter the likelihood
    spec = ModelSpec.factor([["*", 0], ["*", 0], ["*", 0]], intercepts=[0, 0, 0])
    truth = spec.make_theta([], [1.0, 1.2, 0.8], [0.3])
    data = simulate_responses(truth, spec, 300, 2)
    with pytest.raises(SingularHessianError, match="psi12") as info:
        sandwich_se(data, truth, spec, ApproxConfig(1, 5))
    assert abs(info.value.direction[-1]) > 0.99
