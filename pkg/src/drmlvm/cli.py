"""Command line: fit, simulate, bench, quadtable.

Exit status is 0 when the fit converged, 2 when it ran cleanly but did
not converge and 1 on any usage or input error.
"""

import argparse
import os
import sys
import warnings
from dataclasses import replace

import numpy as np

from . import io as dio
from .approx import ApproxConfig
from .errors import InfeasibleConfig
from .estimate import FitOptions, fit
from .model import simulate_responses
from .montecarlo import raw_log, run_scenario, scenario_presets
from .quadrature import gh_rule

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2


class UsageError(Exception):
    pass


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="seed for every random draw (default 0)")
    p.add_argument("--threads", type=int, default=1, help="worker processes for replications (default 1)")


def _add_fit_flags(p):
    p.add_argument("--max-feval", type=int, default=None, help="objective evaluation budget")
    p.add_argument("--grad-tol", type=float, default=FitOptions.grad_tol)
    p.add_argument("--loglik-tol", type=float, default=FitOptions.loglik_tol)
    p.add_argument("--fallback", choices=("laplace", "strict"), default="laplace",
                   help="what to do when the bracket is not positive")
    p.add_argument("--start-box", default="",
                   help="start ranges, e.g. 'loadings=0.5:2,correlations=0:0.3'")
    p.add_argument("--timing", action="store_true", help="include wall times in the JSON output")


def build_parser():
    ap = argparse.ArgumentParser(prog="drmlvm", description="Cut-HDMR likelihood approximation for binary GLLVMs.")
    sub = ap.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a model to a 0/1 CSV")
    f.add_argument("model", help="model config (JSON)")
    f.add_argument("data", help="headerless CSV of 0/1 responses")
    f.add_argument("--s", type=int, default=1, help="truncation order (0 = Laplace)")
    f.add_argument("--nq", type=int, default=5, help="Gauss-Hermite nodes per dimension")
    f.add_argument("--out", default="fit", help="output prefix; writes PREFIX.json and PREFIX.txt")
    _add_common(f)
    _add_fit_flags(f)

    s = sub.add_parser("simulate", help="simulate responses from a model's true values")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", help="model config with a 'truth' block")
    src.add_argument("--preset", help="preset name")
    s.add_argument("--n", type=int, required=True, help="number of subjects")
    s.add_argument("--out", required=True, help="CSV path")
    s.add_argument("--model-out", default=None, help="also write the model config (with truth) here")
    _add_common(s)

    b = sub.add_parser("bench", help="run a Monte Carlo scenario")
    b.add_argument("scenario", help="preset name or scenario config file")
    b.add_argument("--replications", type=int, default=None)
    b.add_argument("--n", type=int, default=None)
    b.add_argument("--s", type=int, nargs="+", default=None, help="truncation orders to compare")
    b.add_argument("--nq", type=int, nargs="+", default=None, help="node counts to compare")
    b.add_argument("--out", default=None, help="output prefix; writes PREFIX.json, PREFIX.txt, PREFIX_raw.csv")
    b.add_argument("--seed", type=int, default=None, help="base seed (default: the scenario's own)")
    b.add_argument("--threads", type=int, default=1)
    _add_fit_flags(b)

    q = sub.add_parser("quadtable", help="print a Gauss-Hermite rule")
    q.add_argument("nq", type=int)
    return ap


def _options(args, default=FitOptions()):
    return FitOptions(max_feval=default.max_feval if args.max_feval is None else args.max_feval,
                      grad_tol=args.grad_tol, loglik_tol=args.loglik_tol)


def _fit_text(res, cfg):
    lines = [f"Approximation: {cfg.label}",
             f"Converged: {'yes' if res.converged else 'no'} ({res.message})",
             f"Log-likelihood: {res.loglik:.6f}",
             f"Function evaluations: {res.n_feval} (+{res.n_feval_se} for standard errors)",
             f"Bracket fallbacks: {res.bracket_fallback_count}",
             f"Wall time (s): {res.wall_time_s:.2f}",
             "",
             f"{'parameter':<14}{'estimate':>14}{'std.err':>14}"]
    for name, est, se in zip(res.names, res.theta_hat.flat, res.standard_errors):
        se_txt = f"{se:>14.6f}" if np.isfinite(se) else f"{'NA':>14}"
        lines.append(f"{name:<14}{est:>14.6f}{se_txt}")
    return "\n".join(lines) + "\n"


def cmd_fit(args):
    for path in (args.model, args.data):
        if not os.path.isfile(path):
            raise UsageError(f"file not found: {path}")
    spec, start, _ = dio.load_model(args.model)
    data = dio.read_responses(args.data)
    if data.n_columns != spec.n_responses:
        raise UsageError(f"data has {data.n_columns} columns but the model has {spec.n_responses} responses")
    cfg = ApproxConfig(args.s, args.nq, args.fallback)
    cfg.check(spec.q)
    box = dio.parse_start_box(args.start_box)
    if start is None:
        start = spec.draw_start(np.random.default_rng(args.seed), box)
    res = fit(data, spec, cfg, start, _options(args))
    dio.write_text(args.out + ".json", dio.dump_json(res.to_dict(timing=args.timing)))
    dio.write_text(args.out + ".txt", _fit_text(res, cfg))
    sys.stdout.write(_fit_text(res, cfg))
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def _preset(name, **kw):
    presets = scenario_presets(**kw)
    if name not in presets:
        raise UsageError(f"unknown preset {name!r}; available: {', '.join(presets)}")
    return presets[name]


def cmd_simulate(args):
    if args.n < 1:
        raise UsageError("--n must be positive")
    if args.preset:
        sc = _preset(args.preset)
        spec, truth = sc.model, sc.truth
    else:
        spec, _, truth = dio.load_model(args.model)
        if truth is None:
            raise UsageError("model config has no 'truth' block to simulate from")
    y = simulate_responses(truth, spec, args.n, args.seed)
    dio.write_text(args.out, dio.format_responses(y))
    if args.model_out:
        dio.write_text(args.model_out, dio.dump_json(dio.model_to_dict(spec, truth=truth)))
    return EXIT_OK


def cmd_bench(args):
    if os.path.isfile(args.scenario):
        sc = dio.scenario_from_dict(dio.load_json(args.scenario, "scenario config"))
    else:
        sc = _preset(args.scenario)
    kw = {}
    if args.replications is not None:
        kw["replications"] = args.replications
    if args.n is not None:
        kw["n"] = args.n
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.s is not None or args.nq is not None:
        s_list = args.s if args.s is not None else sorted({c.s for c in sc.configs})
        nq_list = args.nq if args.nq is not None else sorted({c.n_q for c in sc.configs})
        cfgs = [ApproxConfig(s, nq, args.fallback) for s in s_list for nq in (nq_list if s > 0 else nq_list[:1])]
        kw["configs"] = tuple(cfgs)
    elif args.fallback != "laplace":
        kw["configs"] = tuple(replace(c, fallback=args.fallback) for c in sc.configs)
    if args.start_box:
        kw["start_box"] = dio.parse_start_box(args.start_box)
    if args.max_feval is not None or args.grad_tol != FitOptions.grad_tol or args.loglik_tol != FitOptions.loglik_tol:
        kw["options"] = _options(args, sc.options)
    sc = replace(sc, **kw)
    for c in sc.configs:
        c.check(sc.model.q)
    table, results = run_scenario(sc, workers=max(1, args.threads))
    text = table.to_text()
    sys.stdout.write(text)
    if args.out:
        dio.write_text(args.out + ".json", dio.dump_json(table.to_dict(timing=args.timing)))
        dio.write_text(args.out + ".txt", text)
        dio.write_text(args.out + "_raw.csv", raw_log(sc, results, timing=args.timing))
    return EXIT_OK


def cmd_quadtable(args):
    rule = gh_rule(args.nq)
    for x, w in zip(rule.nodes, rule.weights):
        sys.stdout.write(f"{x:.17g}\t{w:.17g}\n")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "bench": cmd_bench, "quadtable": cmd_quadtable}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](args)
    except (UsageError, InfeasibleConfig, ValueError, OSError) as exc:
        sys.stderr.write(f"drmlvm {args.command}: error: {exc}\n")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
