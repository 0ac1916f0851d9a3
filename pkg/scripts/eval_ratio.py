"""Integrand evaluations per subject relative to full AGH.

Prints eval_count(q, s, n_q) / n_q^q for q=8 over s and n_q, the
quantity behind the cost comparison of truncated expansions.
"""

import argparse
from fractions import Fraction

from drmlvm import eval_count


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--q", type=int, default=8)
    ap.add_argument("--nq", type=int, nargs="+", default=[3, 5, 7, 9, 11])
    args = ap.parse_args()
    print(f"{'s':>3}" + "".join(f"{'nq=' + str(n):>22}" for n in args.nq))
    for s in range(0, args.q + 1):
        cells = []
        for n in args.nq:
            r = Fraction(eval_count(args.q, s, n), n ** args.q)
            cells.append(f"{eval_count(args.q, s, n):>10} {float(r):>11.3e}")
        print(f"{s:>3}" + "".join(f"{c:>22}" for c in cells))


if __name__ == "__main__":
    main()
