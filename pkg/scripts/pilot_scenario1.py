"""Pilot Monte Carlo run used as the oracle for the n=2000 recovery test.

Fits the scenario-1 model with s=1, n_q=7 on 200 replications of n=2000
and writes the mean and standard deviation of each estimate as JSON.
"""

import argparse
import json
from dataclasses import replace

from drmlvm.approx import ApproxConfig
from drmlvm.montecarlo import run_scenario, scenario_presets


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--replications", type=int, default=200)
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=2000)
    ap.add_argument("--out", default="pilot_scenario1.json")
    args = ap.parse_args()
    sc = scenario_presets(n=args.n, replications=args.replications)["scenario1"]
    sc = replace(sc, configs=(ApproxConfig(1, 7),), seed=args.seed)
    table, _ = run_scenario(sc)
    print(table.to_text())
    col = table.columns[0]
    out = {"names": list(table.names), "truth": table.truth.tolist(), "mean": col.mean.tolist(),
           "sd": col.sd.tolist(), "n_converged": col.n_converged, "replications": args.replications,
           "n": args.n, "seed": args.seed}
    with open(args.out, "w") as fh:
        json.dump(out, fh, indent=2)


if __name__ == "__main__":
    main()
