"""Reading and writing model configs, response CSVs and result files.

Model configs are JSON objects.  Keys:

    family      "correlation" or "longitudinal"
    pattern     (correlation) p x q loading pattern, "*" free, numbers fixed
    intercepts  (correlation) list of p cells, "*" free or a fixed number;
                (longitudinal) "equal", "free" or a list of p cells shared
                over time
    p, T        (longitudinal) items and occasions
    q           (correlation, optional) checked against the pattern
    start       optional block of starting values
    truth       optional block of true values used by ``simulate``

Value blocks hold "intercepts" and "loadings" (free entries only, in
model order) and either "correlations" (upper triangle, row by row) or
"phi", "sigma1_sq" and "sigma_u_sq".
"""

import json
import os

import numpy as np

from .approx import ApproxConfig
from .estimate import FitOptions, FitResult
from .model import FREE, ModelSpec, ResponseData, StartBox

MODEL_KEYS = {"family", "pattern", "intercepts", "p", "q", "T", "start", "truth"}
VALUE_KEYS = {
    "correlation": {"intercepts", "loadings", "correlations"},
    "longitudinal": {"intercepts", "loadings", "phi", "sigma1_sq", "sigma_u_sq"},
}
SCENARIO_KEYS = {"name", "model", "n", "replications", "configs", "seed", "start_box", "max_feval"}
CONFIG_KEYS = {"s", "n_q", "fallback"}


class ConfigError(ValueError):
    pass


def _reject_unknown(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    extra = sorted(set(d) - allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(extra)}; allowed: {', '.join(sorted(allowed))}")


def _cell(v):
    return FREE if v == FREE else float(v)


def model_from_dict(d):
    """Returns (spec, start, truth); start and truth may be None."""
    _reject_unknown(d, MODEL_KEYS, "model config")
    family = d.get("family")
    if family == "correlation":
        if "pattern" not in d:
            raise ConfigError("correlation model needs a 'pattern'")
        pattern = [[_cell(c) for c in row] for row in d["pattern"]]
        icpt = d.get("intercepts")
        spec = ModelSpec.factor(pattern, None if icpt is None else [_cell(c) for c in icpt])
        if "q" in d and int(d["q"]) != spec.q:
            raise ConfigError(f"q={d['q']} does not match the pattern width {spec.q}")
        if "p" in d and int(d["p"]) != spec.p:
            raise ConfigError(f"p={d['p']} does not match the pattern height {spec.p}")
    elif family == "longitudinal":
        for k in ("p", "T"):
            if k not in d:
                raise ConfigError(f"longitudinal model needs '{k}'")
        icpt = d.get("intercepts", "equal")
        if isinstance(icpt, list):
            icpt = [_cell(c) for c in icpt]
        spec = ModelSpec.longitudinal(int(d["p"]), int(d["T"]), intercepts=icpt)
        if "q" in d and int(d["q"]) != spec.q:
            raise ConfigError(f"q={d['q']} does not equal p+T={spec.q}")
    else:
        raise ConfigError(f"family must be 'correlation' or 'longitudinal', got {family!r}")
    start = values_from_dict(spec, d["start"], "start") if "start" in d else None
    truth = values_from_dict(spec, d["truth"], "truth") if "truth" in d else None
    return spec, start, truth


def values_from_dict(spec, d, where="values"):
    _reject_unknown(d, VALUE_KEYS[spec.family], where)
    icpt = d.get("intercepts", [])
    load = d.get("loadings", [])
    if spec.family == "correlation":
        cov = d.get("correlations", [])
    else:
        u = d.get("sigma_u_sq", [])
        cov = [d.get("phi"), d.get("sigma1_sq"), *u] if "phi" in d or "sigma1_sq" in d else u
        if any(c is None for c in cov):
            raise ConfigError(f"{where}: 'phi' and 'sigma1_sq' must both be given")
    try:
        theta = spec.make_theta(icpt, load, cov)
        spec.validate(theta)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    return theta


def values_to_dict(spec, theta):
    d = {"intercepts": theta.intercepts.tolist(), "loadings": theta.loadings.tolist()}
    cov = theta.cov.tolist()
    if spec.family == "correlation":
        d["correlations"] = cov
    else:
        d["phi"], d["sigma1_sq"], d["sigma_u_sq"] = cov[0], cov[1], cov[2:]
    return d


def model_to_dict(spec, start=None, truth=None):
    if spec.source is None:
        raise ConfigError("model was not built by ModelSpec.factor or ModelSpec.longitudinal")
    d = {"family": spec.family, **{k: v for k, v in spec.source.items() if v is not None}}
    if start is not None:
        d["start"] = values_to_dict(spec, start)
    if truth is not None:
        d["truth"] = values_to_dict(spec, truth)
    return d


def load_json(path, what):
    if not os.path.isfile(path):
        raise ConfigError(f"{what} file not found: {path}")
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{what} file {path} is not valid JSON: {exc}") from exc


def load_model(path):
    return model_from_dict(load_json(path, "model config"))


def load_fit_result(path):
    """Parse a results file written by ``drmlvm fit`` back into a FitResult."""
    return FitResult.from_dict(load_json(path, "results"))


def read_responses(path):
    """Headerless CSV of 0/1 cells; malformed cells are reported by row and column."""
    if not os.path.isfile(path):
        raise ConfigError(f"data file not found: {path}")
    rows = []
    width = None
    with open(path) as fh:
        for r, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = [c.strip() for c in line.split(",")]
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise ConfigError(f"row {r} has {len(cells)} columns, expected {width}")
            row = []
            for c, cell in enumerate(cells, start=1):
                if cell not in ("0", "1"):
                    raise ConfigError(f"invalid value {cell!r} at row {r}, column {c}: expected 0 or 1")
                row.append(int(cell))
            rows.append(row)
    if not rows:
        raise ConfigError(f"data file {path} is empty")
    return ResponseData(np.array(rows, dtype=np.int8))


def format_responses(matrix):
    m = matrix.matrix if isinstance(matrix, ResponseData) else np.asarray(matrix)
    return "".join(",".join(str(int(v)) for v in row) + "\n" for row in m)


def write_text(path, text):
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def parse_start_box(text):
    """'loadings=0.5:2,correlations=0:0.3' -> StartBox with those ranges replaced."""
    box = StartBox()
    if not text:
        return box
    fields = set(box.__dataclass_fields__)
    kw = {}
    for part in text.split(","):
        try:
            key, rng = part.split("=")
            lo, hi = (float(v) for v in rng.split(":"))
        except ValueError as exc:
            raise ConfigError(f"bad --start-box entry {part!r}; use name=low:high") from exc
        key = key.strip()
        if key not in fields:
            raise ConfigError(f"unknown start-box field {key!r}; allowed: {', '.join(sorted(fields))}")
        if not lo <= hi:
            raise ConfigError(f"start-box range for {key} has low > high")
        kw[key] = (lo, hi)
    return StartBox(**{**{f: getattr(box, f) for f in fields}, **kw})


def scenario_from_dict(d):
    """Scenario config file -> ScenarioSpec."""
    from .montecarlo import ScenarioSpec

    _reject_unknown(d, SCENARIO_KEYS, "scenario config")
    if "model" not in d:
        raise ConfigError("scenario config needs a 'model'")
    spec, _, truth = model_from_dict(d["model"])
    if truth is None:
        raise ConfigError("scenario model needs a 'truth' block")
    configs = []
    for k, c in enumerate(d.get("configs", [{"s": 0}, {"s": 1, "n_q": 5}])):
        _reject_unknown(c, CONFIG_KEYS, f"configs[{k}]")
        configs.append(ApproxConfig(int(c.get("s", 0)), int(c.get("n_q", 5)), c.get("fallback", "laplace")))
    box = StartBox()
    if "start_box" in d:
        _reject_unknown(d["start_box"], set(box.__dataclass_fields__), "start_box")
        box = StartBox(**{k: tuple(v) for k, v in d["start_box"].items()})
    opts = FitOptions(max_feval=int(d.get("max_feval", FitOptions.max_feval)))
    return ScenarioSpec(name=str(d.get("name", "custom")), model=spec, truth=truth, n=int(d.get("n", 500)),
                        replications=int(d.get("replications", 100)), configs=tuple(configs),
                        seed=int(d.get("seed", 12345)), start_box=box, options=opts)
