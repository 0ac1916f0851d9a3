"""Replication harness for the simulation scenarios."""

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .approx import ApproxConfig
from .estimate import FitOptions, fit
from .model import ModelSpec, StartBox, simulate_responses

SCENARIO1_LOADINGS = (2.697, 0.933, 1.232, 1.634)
SCENARIO1_PSI = (0.469,)
SCENARIO2_LOADINGS = (2.697, 0.933, 1.659, 1.241, 1.486, 1.156, 0.756, 0.884)
SCENARIO2_PSI = (0.470, 0.534, 0.480, 0.405, 0.440, 0.571)
# s=3 column of the longitudinal estimates; alpha1 is fixed to 1
LONGITUDINAL_LOADINGS = (0.585, 0.531, 0.619, 0.720)
LONGITUDINAL_PHI = 0.994
LONGITUDINAL_SIGMA1_SQ = 5.715
LONGITUDINAL_SIGMA_U_SQ = (0.573, 1.370, 0.741, 0.699, 0.404)


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    model: ModelSpec
    truth: object
    n: int = 500
    replications: int = 100
    configs: tuple = (ApproxConfig(0), ApproxConfig(1, 5), ApproxConfig(2, 5))
    seed: int = 12345
    start_box: StartBox = StartBox()
    options: FitOptions = FitOptions()

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be at least 1")


def simple_structure(p, q):
    """Loading pattern with p/q consecutive items per factor, intercepts fixed at 0."""
    per = p // q
    pattern = [[0] * q for _ in range(p)]
    for j in range(p):
        pattern[j][min(j // per, q - 1)] = "*"
    return pattern


def scenario_presets(n=None, replications=None):
    """The two factor-model scenarios and the longitudinal model, true values baked in."""
    s1 = ModelSpec.factor(simple_structure(4, 2), intercepts=[0] * 4)
    s2 = ModelSpec.factor(simple_structure(8, 4), intercepts=[0] * 8)
    lg = ModelSpec.longitudinal(5, 3, intercepts="equal")
    presets = {
        "scenario1": ScenarioSpec(
            "scenario1", s1, s1.make_theta([], SCENARIO1_LOADINGS, SCENARIO1_PSI)),
        "scenario2": ScenarioSpec(
            "scenario2", s2, s2.make_theta([], SCENARIO2_LOADINGS, SCENARIO2_PSI),
            configs=tuple(ApproxConfig(s, 5) for s in range(5))),
        "longitudinal": ScenarioSpec(
            "longitudinal", lg,
            lg.make_theta(np.zeros(5), LONGITUDINAL_LOADINGS,
                          (LONGITUDINAL_PHI, LONGITUDINAL_SIGMA1_SQ) + LONGITUDINAL_SIGMA_U_SQ),
            n=300, replications=10, configs=(ApproxConfig(1, 5), ApproxConfig(2, 5)),
            options=FitOptions(max_feval=5000)),
    }
    out = {}
    for name, sc in presets.items():
        kw = {}
        if n is not None:
            kw["n"] = int(n)
        if replications is not None:
            kw["replications"] = int(replications)
        out[name] = replace(sc, **kw)
    return out


def replication_seeds(base_seed, replications):
    """(data_seed, start_seed) per replication, spawned from one SeedSequence."""
    children = np.random.SeedSequence(int(base_seed)).spawn(int(replications))
    return [tuple(int(v) for v in c.generate_state(2, dtype=np.uint64)) for c in children]


def run_replication(scenario, r, seeds=None):
    """Fit every config on replication r's dataset from a common start."""
    data_seed, start_seed = (seeds or replication_seeds(scenario.seed, scenario.replications))[r]
    data = simulate_responses(scenario.truth, scenario.model, scenario.n, data_seed)
    start = scenario.model.draw_start(np.random.default_rng(start_seed), scenario.start_box)
    return [fit(data, scenario.model, cfg, start, scenario.options) for cfg in scenario.configs]


def _run_one(args):
    scenario, r, seeds = args
    return run_replication(scenario, r, seeds)


@dataclass
class ConfigMetrics:
    label: str
    mean: np.ndarray
    rbias: np.ndarray
    sd: np.ndarray
    avg_loglik: float
    pct_cv: float
    avg_nfeval: float
    avg_time: float
    n_converged: int


@dataclass
class MetricsTable:
    scenario: str
    names: tuple
    truth: np.ndarray
    replications: int
    columns: list = field(default_factory=list)

    def to_dict(self, timing=False):
        cols = []
        for c in self.columns:
            d = {
                "config": c.label, "mean": _clean(c.mean), "rbias": _clean(c.rbias), "sd": _clean(c.sd),
                "avg_loglik": _clean(c.avg_loglik), "pct_cv": c.pct_cv, "avg_nfeval": c.avg_nfeval,
                "n_converged": c.n_converged,
            }
            if timing:
                d["avg_time"] = c.avg_time
            cols.append(d)
        return {"scenario": self.scenario, "replications": self.replications, "names": list(self.names),
                "truth": self.truth.tolist(), "configs": cols}

    def to_text(self):
        head = f"{'True':>18}" + "".join(f" | {c.label:^26}" for c in self.columns)
        sub = f"{'':>18}" + "".join(f" | {'Mean':>8}{'RBias':>9}{'S.d.':>9}" for _ in self.columns)
        lines = [f"Monte Carlo results: {self.scenario}, {self.replications} replications", head, sub,
                 "-" * len(sub)]
        for k, name in enumerate(self.names):
            row = f"{name + '=' + format(self.truth[k], '.3f'):>18}"
            for c in self.columns:
                row += f" | {_fmt(c.mean[k]):>8}{_fmt(c.rbias[k]):>9}{_fmt(c.sd[k]):>9}"
            lines.append(row)
        lines.append("-" * len(sub))
        for label, attr, f in (("Avlog-lik", "avg_loglik", "{:.2f}"), ("%cv", "pct_cv", "{:.0f}"),
                               ("Nrfeval", "avg_nfeval", "{:.2f}"), ("Avtime (s)", "avg_time", "{:.2f}")):
            row = f"{label:>18}"
            for c in self.columns:
                v = getattr(c, attr)
                row += f" | {(f.format(v) if np.isfinite(v) else 'NA'):^26}"
            lines.append(row)
        return "\n".join(lines) + "\n"


def _fmt(v):
    return f"{v:.3f}" if np.isfinite(v) else "NA"


def _clean(v):
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        return float(a) if np.isfinite(a) else None
    return [float(x) if np.isfinite(x) else None for x in a]


def aggregate(scenario, results):
    """Build the metrics table from ``results[r][c]`` (replication r, config c).

    Parameter statistics and the average log-likelihood use converged fits
    only, after sign alignment; %cv, evaluations and times use all fits.
    """
    truth = scenario.truth.flat
    table = MetricsTable(scenario.name, scenario.model.names, truth, len(results))
    for c, cfg in enumerate(scenario.configs):
        fits = [rep[c] for rep in results]
        good = [f for f in fits if f.converged]
        est = np.array([scenario.model.align_signs(f.theta_hat).flat for f in good]).reshape(-1, truth.size)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = est.mean(axis=0) if len(good) else np.full(truth.size, np.nan)
            rbias = np.where(truth != 0, (mean - truth) / np.where(truth != 0, truth, 1.0), np.nan)
            sd = est.std(axis=0, ddof=1) if len(good) > 1 else np.full(truth.size, np.nan)
        table.columns.append(ConfigMetrics(
            label=cfg.label, mean=mean, rbias=rbias, sd=sd,
            avg_loglik=float(np.mean([f.loglik for f in good])) if good else math.nan,
            pct_cv=100.0 * len(good) / len(fits),
            avg_nfeval=float(np.mean([f.n_feval for f in fits])),
            avg_time=float(np.mean([f.wall_time_s for f in fits])),
            n_converged=len(good)))
    return table


def run_scenario(scenario, workers=1, cached=None, progress=None):
    """Run all replications and aggregate.

    ``cached`` maps replication index to an already computed list of fits
    (one per config); those replications are not refitted.  Returns
    (table, results).
    """
    cached = cached or {}
    seeds = replication_seeds(scenario.seed, scenario.replications)
    todo = [r for r in range(scenario.replications) if r not in cached]
    done = dict(cached)
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for r, res in zip(todo, pool.map(_run_one, [(scenario, r, seeds) for r in todo])):
                done[r] = res
                if progress:
                    progress(r)
    else:
        for r in todo:
            done[r] = run_replication(scenario, r, seeds)
            if progress:
                progress(r)
    results = [done[r] for r in range(scenario.replications)]
    return aggregate(scenario, results), results


RAW_COLUMNS = ("replication", "config", "parameter", "estimate", "converged", "loglik", "n_feval", "time_s",
               "bracket_fallbacks")


def raw_log(scenario, results, timing=False):
    """Per-replication CSV text; non-converged fits included."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RAW_COLUMNS)
    for r, rep in enumerate(results):
        for cfg, f in zip(scenario.configs, rep):
            for name, val in zip(f.names, f.theta_hat.flat):
                w.writerow((r + 1, cfg.label, name, repr(float(val)), int(f.converged), repr(float(f.loglik)),
                            f.n_feval, repr(f.wall_time_s) if timing else "NA", f.bracket_fallback_count))
    return buf.getvalue()
