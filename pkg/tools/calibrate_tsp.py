"""Measure the approximation gap of the portal-respecting DP against the exact optimum.

Run: python3 tools/calibrate_tsp.py [instances] [shifts] [seed0]
Prints the worst r * (mean length / OPT - 1) per r; the frozen constant adds 25%.
"""
import sys
import time

import numpy as np

from hyptsp.dyntsp import PortalGraph
from hyptsp.hybridtree import prepare
from hyptsp.instances import generate
from hyptsp.verify import exact_tsp

R_VALUES = (4, 8, 16)


def gaps(P, n_shifts, rng, eps=0.5, c_g=1.0):
    """Mean-over-shifts relative gap per r for one instance."""
    prep = prepare(P, eps)
    opt, _ = exact_tsp(prep.perturbed)
    out = {r: [] for r in R_VALUES}
    for _ in range(n_shifts):
        g = PortalGraph(prep.tree(prep.shifts.sample(rng)), max(R_VALUES), c_g, r_values=R_VALUES)
        for r in R_VALUES:
            out[r].append(g.solve(r, b_max=None).length)
    return {r: float(np.mean(v)) / opt - 1.0 for r, v in out.items()}


def main(n_inst=50, n_shifts=32, seed0=70_000):
    rng = np.random.default_rng(seed0)
    worst = {r: 0.0 for r in R_VALUES}
    for k in range(n_inst):
        t = time.time()
        g = gaps(generate("ball", 8, 2.0, seed0 + k), n_shifts, rng)
        for r in R_VALUES:
            worst[r] = max(worst[r], g[r] * r)
        print(k, {r: round(v, 4) for r, v in g.items()}, {r: round(v, 3) for r, v in worst.items()}, f"{time.time() - t:.1f}s", flush=True)
    print("final", worst, "c =", max(worst.values()))


if __name__ == "__main__":
    main(*[int(a) for a in sys.argv[1:]])
