"""Measure the structure-harness statistics whose constants verify.py freezes.

Run: python3 tools/calibrate_harness.py [instances] [shifts]
Prints the worst observed ratio per statistic; frozen values add a 25% margin.
"""
import math
import sys

import numpy as np

from hyptsp.hybridtree import prepare
from hyptsp.instances import generate
from hyptsp.verify import (
    closed_length,
    count_horizontal_crossings,
    exact_tsp,
    layout,
    min_separation,
    snap_and_patch,
    top_crossings,
    weighted_crossing_sum,
)


def main(n_inst=100, n_shifts=32, seed0=50_000, d=2, eps=0.5, c_g=1.0):
    rng = np.random.default_rng(seed0)
    worst = {"weighted": 0.0, "horizontal": 0.0, "top": 0.0, "separation": math.inf}
    patch = {4: [], 8: [], 16: []}
    for k in range(n_inst):
        P = generate("ball", 8, 2.0, seed0 + k, d)
        prep = prepare(P, eps)
        _, order = exact_tsp(prep.perturbed)
        sep = min_separation(prep.perturbed) / (prep.delta / math.sqrt(d))
        worst["separation"] = min(worst["separation"], sep)
        tops, costs = [], {r: [] for r in patch}
        for a in [prep.shifts.sample(rng) for _ in range(n_shifts)]:
            tree = prep.tree(a)
            C = tree.points[order]
            L = closed_length(C)
            scale = L / prep.delta
            worst["weighted"] = max(worst["weighted"], weighted_crossing_sum(C, tree) / (d * math.sqrt(d) * scale))
            worst["horizontal"] = max(worst["horizontal"], count_horizontal_crossings(C, tree) / (math.sqrt(d) * scale))
            for r in patch:
                lay = layout(tree, r, c_g)
                if r == 4:
                    tops.append(top_crossings(C, lay) / (math.sqrt(d) * L))
                costs[r].append(snap_and_patch(C, tree, lay, r).relative_cost)
        worst["top"] = max(worst["top"], float(np.mean(tops)))
        for r in patch:
            patch[r].append(float(np.mean(costs[r])) * r / d**3)
        print(k, {key: round(v, 4) for key, v in worst.items()}, {r: round(max(v), 4) for r, v in patch.items()}, flush=True)
    print("final", worst, {r: max(v) for r, v in patch.items()})


if __name__ == "__main__":
    args = [int(a) for a in sys.argv[1:]]
    main(*args)
