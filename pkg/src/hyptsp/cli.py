"""Command line: generate instances, run the schemes over shifts, render, report."""
from __future__ import annotations

import argparse
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import instances
from .dyntsp import DEFAULT_BMAX, Instance, ResourceCapExceeded, run_tsp
from .hgeom import DomainError, as_array, dist_rows
from .hybridtree import Shift, ShiftCapExceeded
from .portals import DEFAULT_CG

EXIT_OK, EXIT_INVALID, EXIT_CAP = 0, 2, 3
TSP_ORACLE_LIMIT = 15
STEINER_ORACLE_LIMIT = 7
DEFAULT_SHIFT_CAP = 100_000
MODES = ("tsp", "steiner", "harness")


def default_r(eps: float) -> int:
    return math.ceil(8.0 / eps)


@dataclass
class RunConfig:
    mode: str = "tsp"
    d: int = 2
    eps: float = 0.5
    r: Optional[float] = None
    shifts: Union[int, str] = 1
    seed: int = 0
    c_g: float = DEFAULT_CG
    b_max: Optional[int] = DEFAULT_BMAX
    oracle: bool = False
    shift_cap: int = DEFAULT_SHIFT_CAP
    workers: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise DomainError(f"mode must be one of {MODES}")
        if not 0 < self.eps < 1:
            raise DomainError("epsilon must lie in (0, 1)")
        if self.d not in (2, 3):
            raise DomainError("d must be 2 or 3")
        if self.r is None:
            self.r = default_r(self.eps)
        if self.r < 1:
            raise DomainError("r must be at least 1")
        if self.shifts != "enumerate" and (not isinstance(self.shifts, int) or self.shifts < 1):
            raise DomainError("shifts must be a positive count or 'enumerate'")


@dataclass
class ResultRecord:
    mode: str
    config: dict
    n_points: int
    shift_count: int
    per_shift: list
    best: float
    mean: float
    best_shift: int
    oracle: Optional[float] = None
    ratio: Optional[float] = None
    eps_observed: Optional[float] = None
    best_order: list = field(default_factory=list)
    seconds: float = 0.0


# ---------------------------------------------------------------- per shift


def _tsp_shift(inst: Instance, shift: Shift, cfg: RunConfig) -> dict:
    prep = inst.prepared()
    tour = run_tsp(inst, shift, cfg.c_g, cfg.b_max)
    order = tour.point_order()
    X = as_array(prep.normalized.points)[order]
    return {
        "length": float(dist_rows(X, np.roll(X, -1, axis=0)).sum()),
        "portal_length": tour.length,
        "order": order,
        "exact_order": tour.exact,
        "max_portal_use": tour.max_portal_use(),
        "max_boundary_portals": tour.stats.get("max_boundary_portals"),
        "waypoints": tour.stats["waypoints"],
        "edges": tour.stats["edges"],
    }


def _steiner_shift(inst: Instance, shift: Shift, cfg: RunConfig) -> dict:
    from .steiner import run_steiner

    res = run_steiner(inst, shift, cfg.c_g)
    prep = inst.prepared()
    V = res.tree.vertices.copy()
    V[: res.n_points] = as_array(prep.normalized.points)  # terminals back at the input points
    E = np.array(res.tree.edges, dtype=int).reshape(-1, 2)
    length = float(dist_rows(V[E[:, 0]], V[E[:, 1]]).sum()) if len(E) else 0.0
    return {
        "length": length,
        "portal_length": res.length,
        "spans_points": res.spans_points(),
        "steiner_candidates": res.n_steiner_candidates,
        **res.stats,
    }


def _harness_shift(inst: Instance, shift: Shift, cfg: RunConfig) -> dict:
    from .verify import check_r_simple, count_horizontal_crossings, layout, snap_and_patch, top_crossings

    prep = inst.prepared()
    tree = prep.tree(shift)
    C = tree.points[inst._oracle_order]
    lay = layout(tree, cfg.r, cfg.c_g)
    rep = snap_and_patch(C, tree, lay, cfg.r)
    chk = check_r_simple(rep.tour, tree, lay, cfg.r)
    return {
        "length": rep.patched_length,
        "original_length": rep.original_length,
        "relative_cost": rep.relative_cost,
        "weighted_sum": rep.weighted_sum,
        "horizontal_crossings": count_horizontal_crossings(C, tree),
        "top_crossings": top_crossings(C, lay),
        "snapped": rep.snapped,
        "fixed_ok": chk.fixed_ok,
        "adaptive_ok": chk.adaptive_ok,
        "violations_before": len(check_r_simple(C, tree, lay, cfg.r).violations),
    }


_RUNNERS = {"tsp": _tsp_shift, "steiner": _steiner_shift, "harness": _harness_shift}


def _one(job) -> dict:
    sid, shift, inst, cfg = job
    t0 = time.perf_counter()
    rec = _RUNNERS[cfg.mode](inst, shift, cfg)
    rec.update(shift_id=sid, a_x=list(shift.a_x), a_z=shift.a_z, seconds=time.perf_counter() - t0)
    return rec


def shift_list(inst: Instance, cfg: RunConfig) -> list:
    space = inst.prepared().shifts
    if cfg.shifts == "enumerate":
        return space.enumerate(cfg.shift_cap)
    rng = np.random.default_rng(cfg.seed)
    return [space.sample(rng) for _ in range(cfg.shifts)]


def run(points, cfg: RunConfig) -> ResultRecord:
    """Run one mode over the configured shifts; the best shift wins."""
    if len(points) < 2:
        raise DomainError("need at least two points")
    if points[0].d != cfg.d:
        raise DomainError(f"instance has dimension {points[0].d}, config says {cfg.d}")
    t0 = time.perf_counter()
    inst = Instance(list(points), cfg.eps, cfg.r)
    prep = inst.prepared()
    if cfg.mode == "harness":
        from .verify import exact_tsp

        inst._oracle_order = exact_tsp(prep.perturbed)[1]
    shifts = shift_list(inst, cfg)
    jobs = [(i, a, inst, cfg) for i, a in enumerate(shifts)]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            per = list(pool.map(_one, jobs))
    else:
        per = [_one(j) for j in jobs]
    per.sort(key=lambda r: r["shift_id"])
    lengths = [r["length"] for r in per]
    best_i = int(np.argmin(lengths))
    rec = ResultRecord(
        mode=cfg.mode,
        config=asdict(cfg),
        n_points=len(points),
        shift_count=len(shifts),
        per_shift=per,
        best=float(lengths[best_i]),
        mean=float(np.mean(lengths)),
        best_shift=best_i,
        best_order=per[best_i].get("order", []),
    )
    if cfg.oracle:
        _attach_oracle(rec, points, cfg)
    rec.seconds = time.perf_counter() - t0
    return rec


def _attach_oracle(rec: ResultRecord, points, cfg: RunConfig) -> None:
    n = len(points)
    if cfg.mode == "steiner":
        if n > STEINER_ORACLE_LIMIT:
            return
        from .steiner import reference_steiner

        rec.oracle = reference_steiner(points)
    else:
        if n > TSP_ORACLE_LIMIT:
            return
        from .verify import exact_tsp

        rec.oracle = exact_tsp(points)[0]
    if cfg.mode == "harness":
        return
    rec.ratio = rec.best / rec.oracle
    rec.eps_observed = rec.ratio - 1.0
    if cfg.mode == "tsp" and rec.ratio < 1.0 - 1e-9:
        raise AssertionError(f"tour shorter than the exact optimum: ratio {rec.ratio}")


# ---------------------------------------------------------------- subcommands


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_result(rec: ResultRecord, path) -> None:
    Path(path).write_text(json.dumps(_to_jsonable(asdict(rec)), indent=1, sort_keys=True) + "\n")


def cmd_generate(args) -> int:
    pts = instances.generate(args.kind, args.n, args.scale, args.seed, args.d)
    if args.out:
        instances.save(pts, args.out)
    else:
        sys.stdout.write(json.dumps(instances.to_json(pts), indent=1) + "\n")
    return EXIT_OK


def _parse_shifts(text: str):
    if text == "enumerate":
        return text
    try:
        return int(text)
    except ValueError:
        raise DomainError(f"--shifts must be an integer or 'enumerate', got {text!r}") from None


def cmd_run(args) -> int:
    pts = instances.load(args.inp)
    cfg = RunConfig(
        mode=args.mode,
        d=args.d or pts[0].d,
        eps=args.epsilon,
        r=args.r,
        shifts=_parse_shifts(args.shifts),
        seed=args.seed,
        c_g=args.cg,
        b_max=args.bmax,
        oracle=args.oracle,
        shift_cap=args.shift_cap,
        workers=args.workers,
    )
    rec = run(pts, cfg)
    if args.out:
        write_result(rec, args.out)
    summary = f"{cfg.mode}: best {rec.best:.6f} mean {rec.mean:.6f} over {rec.shift_count} shifts"
    if rec.ratio is not None:
        summary += f", ratio {rec.ratio:.6f}"
    print(summary)
    if args.svg:
        _render_best(pts, cfg, rec, args.svg)
    return EXIT_OK


def _render_best(pts, cfg: RunConfig, rec: ResultRecord, path) -> None:
    from .render import render_svg
    from .verify import layout

    inst = Instance(list(pts), cfg.eps, cfg.r)
    prep = inst.prepared()
    best = rec.per_shift[rec.best_shift]
    tree = prep.tree(Shift(tuple(best["a_x"]), best["a_z"]))
    lay = layout(tree, cfg.r, cfg.c_g)
    tour = tree.points[rec.best_order] if rec.best_order else None
    svg = render_svg(tree.points, tree, [ps.points for ps in lay.sets], tour)
    Path(path).write_text(svg)


def cmd_render(args) -> int:
    from .render import render_svg
    from .verify import layout

    pts = instances.load(args.inp)
    if pts[0].d != 2:
        raise DomainError("rendering needs d = 2")
    inst = Instance(pts, args.epsilon, args.r or default_r(args.epsilon))
    prep = inst.prepared()
    tree = prep.tree(Shift.identity(2))
    lay = layout(tree, inst.r, args.cg)
    Path(args.svg).write_text(render_svg(tree.points, tree, [ps.points for ps in lay.sets], None))
    return EXIT_OK


def cmd_report(args) -> int:
    doc = json.loads(Path(args.inp).read_text())
    per = doc["per_shift"]
    print(f"mode {doc['mode']}, {doc['n_points']} points, {doc['shift_count']} shifts")
    print(f"best {doc['best']:.6f} (shift {doc['best_shift']}), mean {doc['mean']:.6f}")
    if doc.get("ratio") is not None:
        print(f"oracle {doc['oracle']:.6f}, ratio {doc['ratio']:.6f}")
    for key in ("relative_cost", "weighted_sum", "horizontal_crossings", "top_crossings", "max_portal_use"):
        vals = [r[key] for r in per if key in r]
        if vals:
            print(f"{key}: mean {np.mean(vals):.6g}, max {np.max(vals):.6g}")
    if per and "fixed_ok" in per[0]:
        print(f"patched tours r-simple: {sum(r['fixed_ok'] for r in per)}/{len(per)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hyptsp", description="Approximate TSP and Steiner tree in hyperbolic space.")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a random instance")
    g.add_argument("--kind", choices=("ball", "horobox"), default="ball")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--scale", type=float, default=2.0, help="ball radius or horobox extent")
    g.add_argument("--d", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="run a scheme over shifts")
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--mode", choices=MODES, default="tsp")
    r.add_argument("--d", type=int)
    r.add_argument("--epsilon", type=float, default=0.5)
    r.add_argument("--r", type=float)
    r.add_argument("--shifts", default="1", help="a count, or 'enumerate'")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--cg", type=float, default=DEFAULT_CG, help="negative-level grid factor")
    r.add_argument("--bmax", type=int, default=DEFAULT_BMAX)
    r.add_argument("--shift-cap", type=int, default=DEFAULT_SHIFT_CAP)
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--oracle", action="store_true")
    r.add_argument("--svg")
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("render", help="draw the d=2 decomposition and portals")
    v.add_argument("--in", dest="inp", required=True)
    v.add_argument("--epsilon", type=float, default=0.5)
    v.add_argument("--r", type=float)
    v.add_argument("--cg", type=float, default=DEFAULT_CG)
    v.add_argument("--svg", required=True)
    v.set_defaults(func=cmd_render)

    p = sub.add_parser("report", help="summarise a result file")
    p.add_argument("--in", dest="inp", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ShiftCapExceeded, ResourceCapExceeded) as exc:
        print(f"resource cap exceeded: {exc}", file=sys.stderr)
        return EXIT_CAP
    except (DomainError, KeyError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
