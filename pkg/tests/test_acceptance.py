"""The eight acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line, printed inline and again in the
terminal summary.  Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import math
import time
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

import drmlvm.approx as approx
from drmlvm import (ApproxConfig, ModelSpec, covariance_longitudinal, eval_count, find_mode, fit,
                    hdmr_coefficient, marginal_loglik_subject, simulate_responses)
from drmlvm.approx import cut_hdmr_expectation
from drmlvm.cli import main
from drmlvm.errors import InfeasibleConfig
from drmlvm.montecarlo import replication_seeds, run_scenario, scenario_presets

from conftest import SCEN1_PATTERN, random_factor_problem
from oracles import agh_loglik, laplace_loglik, tensor_expectation


@pytest.fixture
def report(request, capsys):
    def record(k, ok, detail):
        line = f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config._acceptance_lines = getattr(request.config, "_acceptance_lines", []) + [line]
        with capsys.disabled():
            print("\n" + line)
        return ok
    return record


def subject(y, theta, spec, config):
    return marginal_loglik_subject(y, theta, spec, config, find_mode(y, theta, spec)).value


@pytest.fixture(scope="module")
def scenario1_runs():
    """Scenario 1, n=500, n_q=5: 30 replications of the three preset configs."""
    sc = replace(scenario_presets()["scenario1"], replications=30)
    t0 = time.perf_counter()
    _, results = run_scenario(sc)
    return sc, results, time.perf_counter() - t0


def test_criterion1_limit_identities(report):
    rng = np.random.default_rng(101)
    worst0 = worstq = 0.0
    for k in range(200):
        q = (1, 2, 3)[k % 3]
        spec, theta, y = random_factor_problem(rng, q)
        n_q = int(rng.integers(2, 8))
        lap, ref_lap = subject(y, theta, spec, ApproxConfig(0)), laplace_loglik(y, theta, spec)
        agh, ref_agh = subject(y, theta, spec, ApproxConfig(q, n_q)), agh_loglik(y, theta, spec, n_q)
        worst0 = max(worst0, abs(lap - ref_lap) / abs(ref_lap))
        worstq = max(worstq, abs(agh - ref_agh) / abs(ref_agh))
    ok = worst0 <= 1e-12 and worstq <= 1e-12
    report(1, ok, f"max rel error s=0 vs Laplace {worst0:.2e}, s=q vs AGH {worstq:.2e} (tol 1e-12)")
    assert ok


def test_criterion2_accuracy_ordering(report):
    rng = np.random.default_rng(202)
    spec = ModelSpec.factor(SCEN1_PATTERN, intercepts=[0, 0, 0, 0])
    err_lap, err_drm = [], []
    for _ in range(100):
        theta = spec.make_theta([], rng.uniform(0.5, 3.0, 4), [rng.uniform(-0.8, 0.8)])
        y = simulate_responses(theta, spec, 1, int(rng.integers(2 ** 31))).matrix[0]
        truth = agh_loglik(y, theta, spec, 41)
        err_lap.append(abs(subject(y, theta, spec, ApproxConfig(0)) - truth))
        err_drm.append(abs(subject(y, theta, spec, ApproxConfig(1, 11)) - truth))
    a, b = float(np.mean(err_drm)), float(np.mean(err_lap))
    ok = a < b
    report(2, ok, f"mean |log f error|: s=1,nq=11 {a:.3e} < Laplace {b:.3e}")
    assert ok


def test_criterion3_additive_exactness(report):
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(10):
        q, n_q = int(rng.integers(2, 6)), int(rng.integers(3, 8))
        coefs = rng.normal(size=(q, 2 * n_q))
        const = 2.0 + abs(rng.normal())

        def ratio(x):
            return const + sum(np.polynomial.polynomial.polyval(x[:, k], coefs[k]) for k in range(q))

        full = tensor_expectation(ratio, q, n_q)
        worst = max(worst, abs(cut_hdmr_expectation(ratio, q, 1, n_q) - full) / abs(full))
    ok = worst <= 1e-10
    report(3, ok, f"max rel gap s=1 vs full tensor over 10 additive problems {worst:.2e} (tol 1e-10)")
    assert ok


def test_criterion4_scenario1_bias(report, scenario1_runs):
    sc, results, _ = scenario1_runs
    sc20 = replace(sc, replications=20)
    from drmlvm.montecarlo import aggregate
    table = aggregate(sc20, results[:20])
    lap, drm1, agh = table.columns
    i_a11, i_psi = sc.model.names.index("alpha11"), sc.model.names.index("psi12")
    checks = {
        "a": lap.rbias[i_a11] < -0.3,
        "b": lap.rbias[i_psi] > 0.2,
        "c": abs(drm1.rbias[i_psi]) < abs(lap.rbias[i_psi]),
        "d": agh.pct_cv >= lap.pct_cv,
    }
    ok = all(checks.values())
    report(4, ok, f"Laplace RBias(a11)={lap.rbias[i_a11]:+.3f}, RBias(psi12)={lap.rbias[i_psi]:+.3f}; "
                  f"s=1 RBias(psi12)={drm1.rbias[i_psi]:+.3f}; %cv AGH5={agh.pct_cv:.0f} Laplace={lap.pct_cv:.0f}; "
                  f"failed parts: {[k for k, v in checks.items() if not v] or 'none'}")
    assert ok


def test_criterion5_eval_counts(report, monkeypatch):
    ratios = {n: Fraction(eval_count(8, 1, n), n ** 8) for n in (5, 7, 11)}
    expect = {5: (Fraction(41, 5 ** 8), -4), 7: (Fraction(57, 7 ** 8), -5), 11: (Fraction(89, 11 ** 8), -7)}
    exact = all(ratios[n] == expect[n][0] for n in ratios)
    # "order 10^k" read as within a factor of ten either side
    orders = all(10.0 ** (k - 1) < float(ratios[n]) < 10.0 ** (k + 1) for n, (_, k) in expect.items())

    seen = []
    real = approx.joint_logdensity

    def counting(st_, Y, B):
        seen.append(B.shape[1] if B.ndim == 3 else 1)
        return real(st_, Y, B)

    monkeypatch.setattr(approx, "joint_logdensity", counting)
    rng = np.random.default_rng(505)
    spec = ModelSpec.factor([["*" if j == k else 0 for k in range(8)] for j in range(8)])
    theta = spec.make_theta(rng.normal(size=8), rng.uniform(0.5, 1.5, 8), np.zeros(spec.n_cov))
    y = rng.integers(0, 2, 8)
    mode = find_mode(y, theta, spec)
    counted = True
    for n in (5, 7, 11):
        seen.clear()
        res = marginal_loglik_subject(y, theta, spec, ApproxConfig(1, n), mode)
        constant = 1 if hdmr_coefficient(8, 1, 0) != 0 else 0
        counted &= sum(seen) + constant == eval_count(8, 1, n) == res.eval_count
    ok = exact and orders and counted
    report(5, ok, "ratios " + ", ".join(f"{r.numerator}/{n}^8={float(r):.2e}" for n, r in ratios.items())
           + f"; instrumented counts match: {counted}")
    assert ok


def test_criterion6_longitudinal(report):
    sc = scenario_presets()["longitudinal"]
    cfg = ApproxConfig(1, 5)
    try:
        ApproxConfig(8, 5).check(8)
        refused = False
    except InfeasibleConfig:
        refused = True
    G0 = covariance_longitudinal(0.0, 1.0, [1.0] * 5, 3)[:3, :3]
    G1 = covariance_longitudinal(1.0, 1.0, [1.0] * 5, 3)[:3, :3]
    t = np.arange(1, 4)
    gamma_ok = np.array_equal(G0, np.eye(3)) and np.array_equal(G1, np.minimum.outer(t, t).astype(float))

    data_seed, start_seed = replication_seeds(sc.seed, 1)[0]
    data = simulate_responses(sc.truth, sc.model, 300, data_seed)
    start = sc.model.draw_start(np.random.default_rng(start_seed), sc.start_box)
    t0 = time.perf_counter()
    res = fit(data, sc.model, cfg, start, sc.options)
    elapsed = time.perf_counter() - t0
    ok = res.converged and elapsed < 900 and refused and gamma_ok
    small = [n for n, v in zip(res.names, res.theta_hat.flat) if n.startswith("sigma_u") and v < 1e-3]
    report(6, ok, f"q=8 fit s=1,nq=5 in {elapsed:.0f}s, converged={res.converged} ({res.message}); "
                  f"variances at the boundary: {small or 'none'}; AGH5 refused: {refused}; Gamma unit cases: {gamma_ok}")
    assert ok


def test_criterion7_sandwich(report, scenario1_runs):
    spec = ModelSpec.factor([[0]], intercepts=["*"])
    y = np.zeros((100, 1), dtype=int)
    y[:50] = 1
    pure = fit(y, spec, ApproxConfig(0), spec.make_theta([0.3], [], []))
    analytic = math.sqrt(1 / (100 * 0.25))
    pure_ok = abs(pure.standard_errors[0] / analytic - 1) <= 0.02

    sc, results, _ = scenario1_runs
    c = [cfg.label for cfg in sc.configs].index(ApproxConfig(2, 5).label)
    k = sc.model.names.index("psi12")
    good = [rep[c] for rep in results if rep[c].converged]
    med_se = float(np.median([f.standard_errors[k] for f in good]))
    mc_sd = float(np.std([sc.model.align_signs(f.theta_hat).flat[k] for f in good], ddof=1))
    ratio = med_se / mc_sd
    ok = pure_ok and 0.5 <= ratio <= 2.0
    report(7, ok, f"pure-intercept SE {pure.standard_errors[0]:.5f} vs {analytic:.5f}; scenario 1 s=q=2 nq=5, "
                  f"{len(good)}/30 converged: median SE(psi12)={med_se:.4f}, MC sd={mc_sd:.4f}, ratio {ratio:.2f}")
    assert ok


def test_criterion8_determinism(report, tmp_path):
    def run(tag, threads):
        d = tmp_path / f"{tag}_{threads}"
        d.mkdir()
        model = d / "model.json"
        codes = [
            main(["simulate", "--preset", "scenario1", "--n", "300", "--out", str(d / "y.csv"),
                  "--model-out", str(model), "--seed", "8"]),
            main(["fit", str(model), str(d / "y.csv"), "--s", "1", "--nq", "5", "--out", str(d / "fit"),
                  "--seed", "8"]),
            main(["bench", "scenario1", "--replications", "3", "--n", "200", "--s", "0", "1", "--nq", "3",
                  "--out", str(d / "bench"), "--seed", "8", "--threads", str(threads)]),
        ]
        assert codes == [0, 0, 0]
        return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.suffix in (".csv", ".json")}

    same = True
    for threads in (1, 2):
        a, b = run("a", threads), run("b", threads)
        same &= a == b
    report(8, same, "simulate, fit and bench outputs byte-identical across repeated runs (1 and 2 workers)")
    assert same
