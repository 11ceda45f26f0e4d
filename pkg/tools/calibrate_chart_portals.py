"""Measure the chart's bi-Lipschitz ratios and per-facet portal counts.

Run: python3 tools/calibrate_chart_portals.py
"""
import math

import numpy as np

from hyptsp.hgeom import dist_rows
from hyptsp.hybridtree import Cell, Shift, prepare, phi
from hyptsp.instances import generate
from hyptsp.portals import DEFAULT_CG, all_facets, place


def chart_ratios(d, pairs=20_000, seed=7, heights=64):
    """Worst ratios over shifts whose a_z sweeps [1, 2); the chart's distortion depends on a_z."""
    rng = np.random.default_rng(seed)
    prep = prepare(generate("ball", 8, 2.0, seed, d), 0.5)
    cell = Cell(0, 1, (0,) * (d - 1), 0)
    up = down = 0.0
    for a_z in np.append(1.0 + np.arange(heights) / heights, 2.0 - 1e-9):
        tree = prep.tree(Shift((0.0,) * (d - 1), float(a_z)))
        lo, hi = tree.real_box(cell)
        P = lo + rng.random((pairs, d)) * (hi - lo)
        # short pairs probe the local stretch, long ones the global one
        Q = np.clip(P + (rng.random((pairs, d)) - 0.5) * (hi - lo) * rng.choice([1.0, 1e-3], (pairs, 1)), lo, hi)
        hyp = dist_rows(P, Q)
        fp = np.array([phi(tree, cell, p) for p in P])
        fq = np.array([phi(tree, cell, q) for q in Q])
        eu = np.linalg.norm(fp - fq, axis=1)
        ok = hyp > 0
        up = max(up, float(np.max(hyp[ok] / eu[ok])))
        down = max(down, float(np.max(eu[ok] / (math.sqrt(d) * hyp[ok]))))
    return up, down


def portal_ratio(d, seed=900, c_g=DEFAULT_CG):
    """Worst count / r^(d-1) over both generators, eps in 0.1..0.9, n up to 32."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    sizes = (4, 8, 16, 32) if d == 2 else (4, 8, 16)
    for kind in ("ball", "horobox"):
        for eps in (0.1, 0.25, 0.5, 0.9):
            for n in sizes:
                for k in range(3):
                    prep = prepare(generate(kind, n, 2.0, seed + 31 * k + n, d), eps)
                    tree = prep.tree(prep.shifts.sample(rng))
                    for f in all_facets(tree):
                        for r in (2, 16):
                            worst = max(worst, len(place(f, r, c_g)) / r ** (d - 1))
        print(d, kind, worst, flush=True)
    return worst


if __name__ == "__main__":
    for d in (2, 3):
        print("chart", d, chart_ratios(d))
    for d in (2, 3):
        print("portals", d, portal_ratio(d))
