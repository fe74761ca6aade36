"""Evaluate the norm gap g(N) = E||T(x+b)|| - E||x+b|| on a dense grid.

Gives an independent location for the fixed point that bisection must land
in. Slow at the default config (one forward pass per grid point).

    python scripts/dense_grid_oracle.py --seed 0 --out results/dense_grid_seed0.json
"""

import argparse
import json
import time

import numpy as np

from driftlab.experiments import norm_gap, prepare
from driftlab.transformer_block import BlockConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lo", type=float, default=0.0)
    ap.add_argument("--hi", type=float, default=100.0)
    ap.add_argument("--steps", type=int, default=101)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    setup = prepare(BlockConfig(), args.seed)
    grid = np.linspace(args.lo, args.hi, args.steps)
    t0 = time.perf_counter()
    gaps = []
    for n in grid:
        gaps.append(norm_gap(setup, float(n)))
        print(f"N={n:7.3f}  g={gaps[-1]: .6f}", flush=True)
    crossings = [float(a + (b - a) * ga / (ga - gb))
                 for a, b, ga, gb in zip(grid, grid[1:], gaps, gaps[1:]) if ga * gb < 0]
    print(f"sign changes at N ~ {crossings}  ({time.perf_counter() - t0:.0f} s)")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"seed": args.seed, "grid": grid.tolist(), "g": gaps,
                       "crossings": crossings}, fh, indent=2)
            fh.write("\n")


if __name__ == "__main__":
    main()
