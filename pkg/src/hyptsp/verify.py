"""Exact oracles and the empirical harness for the structure theorem.

Tours here are closed walks given as ``(m, d)`` coordinate arrays in the real
frame of a :class:`ShiftedTree` (the last row connects back to the first).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dyntsp import GEOM_TOL, PLANE_TOL, Tour, held_karp, repair_corner
from .hgeom import DomainError, HPoint, as_array, dist_rows, geodesic_peak, pairwise_dist, plane_crossings
from .hybridtree import ShiftedTree, width_unit
from .portals import DEFAULT_CG, NEG, TOP, Facet, PortalSet, _grid, all_facets, place

EXACT_LIMIT = 15
ENUMERATION_LIMIT = 9

# Frozen from tools/calibrate_harness.py (100 ball instances, 32 shifts):
# worst observed ratio +25%, separation at 0.8x the minimum.
C_WEIGHTED = 0.30  # weighted vertical crossings <= C_WEIGHTED * d*sqrt(d)/delta * len
C_HORIZONTAL = 1.24  # horizontal crossings <= C_HORIZONTAL * sqrt(d)/delta * len
C_TOP = 0.79  # mean Top-facet crossings <= C_TOP * sqrt(d) * len
C_SEPARATION = 0.49  # min pairwise distance >= C_SEPARATION * delta / sqrt(d)
C_PATCH = 0.046  # mean relative patching cost <= C_PATCH * d^3 / r


# ---------------------------------------------------------------- oracle


def _points_array(P) -> np.ndarray:
    if isinstance(P, np.ndarray):
        return np.atleast_2d(P.astype(float))
    return as_array(list(P))


def brute_force_tsp(D: np.ndarray):
    """Optimal closed tour by enumerating orders with the first city fixed."""
    n = len(D)
    if n <= 3:
        order = list(range(n))
        return float(sum(D[a, b] for a, b in zip(order, order[1:] + order[:1]))), order
    perms = np.array(list(itertools.permutations(range(1, n))), dtype=np.int64)
    full = np.hstack([np.zeros((len(perms), 1), dtype=np.int64), perms])
    costs = D[full, np.roll(full, -1, axis=1)].sum(axis=1)
    i = int(np.argmin(costs))
    return float(costs[i]), [int(v) for v in full[i]]


def exact_tsp(P):
    """Exact optimum ``(length, order)``; orders of up to 9 points are cross-checked by enumeration."""
    X = _points_array(P)
    n = len(X)
    if n < 2:
        raise DomainError("exact TSP needs at least two points")
    if n > EXACT_LIMIT:
        raise DomainError(f"exact TSP refused for n={n} > {EXACT_LIMIT}")
    D = pairwise_dist(X)
    cost, order = held_karp(D)
    if n <= ENUMERATION_LIMIT:
        check, _ = brute_force_tsp(D)
        if abs(check - cost) > 1e-9 * max(1.0, cost):
            raise AssertionError(f"Held-Karp {cost} disagrees with enumeration {check}")
    return float(cost), list(order)


def closed_length(C: np.ndarray) -> float:
    return float(dist_rows(C, np.roll(C, -1, axis=0)).sum())


def tour_coords(tour) -> np.ndarray:
    if isinstance(tour, Tour):
        return tour.coords()
    if isinstance(tour, np.ndarray):
        return tour
    return as_array(list(tour))


# ---------------------------------------------------------------- crossings


@dataclass
class CrossingSet:
    """Crossings of one tour with the finest vertical and horizontal planes."""

    tour_id: int
    vertical: np.ndarray  # (k, d) crossing points, real frame
    vertical_axis: np.ndarray
    horizontal: int

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / self.vertical[:, -1] if len(self.vertical) else np.zeros(0)

    @property
    def weighted_sum(self) -> float:
        return float(self.weights.sum())


def _pieces(C: np.ndarray):
    return C, np.roll(C, -1, axis=0)


def vertical_crossings(tour, tree: ShiftedTree):
    """Crossing points with every vertical wall of the finest-level cells.

    In lattice row k (lattice z in [2^k, 2^{k+1}]) these walls sit at the
    multiples of ``2^k * w * 2^lmin``, so only every 2^k-th base plane counts.
    """
    C = tour_coords(tour)
    d = C.shape[1]
    U = np.array([tree.to_lattice(c) for c in C])
    A, B = _pieces(U)
    unit = width_unit(d) * 2.0**tree.lmin
    pts, axes = [], []
    for axis in range(d - 1):
        lo = np.minimum(A[:, axis], B[:, axis]) / unit
        hi = np.maximum(A[:, axis], B[:, axis]) / unit
        first = np.floor(lo + 1e-9).astype(np.int64) + 1
        last = np.ceil(hi - 1e-9).astype(np.int64) - 1
        for i in np.flatnonzero(last >= first):
            js = np.arange(first[i], last[i] + 1)
            P = np.repeat(A[i : i + 1], len(js), axis=0)
            Q = np.repeat(B[i : i + 1], len(js), axis=0)
            mask, X = _multi_plane(P, Q, axis, js * unit)
            X, js = X[mask], js[mask]
            if not len(X):
                continue
            row = np.floor(np.log2(X[:, -1]) + 1e-12).astype(np.int64)
            row = np.maximum(row, 0)
            keep = js % (2**row) == 0
            for x in X[keep]:
                pts.append(tree.to_real(x))
                axes.append(axis)
    V = np.array(pts) if pts else np.zeros((0, d))
    return V, np.array(axes, dtype=int)


def _multi_plane(P: np.ndarray, Q: np.ndarray, axis: int, offsets: np.ndarray):
    """plane_crossings with a different plane offset per row.

    Each row is translated so its plane sits at 0; translations are isometries.
    """
    P, Q = P.copy(), Q.copy()
    P[:, axis] -= offsets
    Q[:, axis] -= offsets
    mask, X = plane_crossings(P, Q, axis, 0.0, tol=GEOM_TOL)
    X[:, axis] += offsets
    return mask, X


def weighted_crossing_sum(tour, tree: ShiftedTree) -> float:
    """Sum of 1/z over crossings with the vertical walls of the finest-level cells."""
    V, _ = vertical_crossings(tour, tree)
    return float((1.0 / V[:, -1]).sum()) if len(V) else 0.0


def count_horizontal_crossings(tour, tree: ShiftedTree) -> int:
    """Crossings with the horospheres log2(z) in 2^lmin * Z (lattice frame).

    A geodesic rises to its peak and falls again, so it may cross a horosphere
    twice; touching at an endpoint or at the peak does not count.
    """
    C = tour_coords(tour)
    U = np.array([tree.to_lattice(c) for c in C])
    A, B = _pieces(U)
    step = 2.0**tree.lmin
    peak = geodesic_peak(A, B)
    la, lb, lp = (np.log2(v) / step for v in (A[:, -1], B[:, -1], peak))

    def strictly_between(a, b):
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        return np.maximum(np.ceil(hi - 1e-9) - np.floor(lo + 1e-9) - 1, 0)

    return int((strictly_between(la, lp) + strictly_between(lp, lb)).sum())


def crossing_set(tour, tree: ShiftedTree, tour_id: int = 0) -> CrossingSet:
    V, ax = vertical_crossings(tour, tree)
    return CrossingSet(tour_id, V, ax, count_horizontal_crossings(tour, tree))


def min_separation(points) -> float:
    """Smallest distance between distinct locations (snapping may merge points)."""
    X = np.unique(np.round(_points_array(points), 12), axis=0)
    if len(X) < 2:
        return math.inf
    D = pairwise_dist(X)
    np.fill_diagonal(D, np.inf)
    return float(D.min())


# ---------------------------------------------------------------- facet passages


@dataclass
class Layout:
    """Facets of a tree with their portal sets at one r."""

    facets: list
    sets: list
    _planes: dict = field(default_factory=dict, repr=False)

    def __iter__(self):
        return iter(zip(self.facets, self.sets))

    def plane_portals(self, f: Facet) -> np.ndarray:
        """Every portal lying on the plane of f.

        Extended facets overlap their coplanar neighbours, and the corner
        portals of crossing facets sit on this plane too; a crossing at any
        of these points is accepted.
        """
        key = (f.axis, round(f.offset, 12))
        if key not in self._planes:
            if not hasattr(self, "_all"):
                chunks = [ps.points for _, ps in self if len(ps)]
                self._all = np.vstack(chunks) if chunks else np.zeros((0, f.d))
            X = self._all
            on = np.abs(X[:, f.axis] - f.offset) <= GEOM_TOL * max(1.0, abs(f.offset))
            self._planes[key] = X[on]
        return self._planes[key]


def layout(tree: ShiftedTree, r: float, c_g: float = DEFAULT_CG) -> Layout:
    facets = all_facets(tree)
    return Layout(facets, [place(f, r, c_g) for f in facets])


SIDE_TOL = PLANE_TOL  # the DP and the checker must agree on sides


def _side(v: np.ndarray, c: float) -> np.ndarray:
    tol = SIDE_TOL * max(1.0, abs(c))
    return np.where(np.abs(v - c) <= tol, 0, np.sign(v - c)).astype(int)


def _within(X: np.ndarray, f: Facet) -> np.ndarray:
    tol = GEOM_TOL * max(1.0, float(np.abs(f.hi).max()))
    return np.all((X >= f.lo - tol) & (X <= f.hi + tol), axis=1)


def _claims(x: np.ndarray, f: Facet) -> bool:
    """Whether a waypoint at x takes a crossing of f (on its plane, inside it)."""
    return bool(_side(x[f.axis : f.axis + 1], f.offset)[0] == 0 and _within(x[None, :], f)[0])


def passages(C: np.ndarray, f: Facet) -> list:
    """Where a closed walk crosses facet f: list of ``(point, waypoint or None)``.

    A crossing is a change of side between consecutive off-plane waypoints.
    If on-plane waypoints sit in between, the first one inside the facet is
    the crossing point; otherwise the piece itself is intersected.
    """
    m = len(C)
    s = _side(C[:, f.axis], f.offset)
    out = []
    if s.min() == s.max() or not (s.min() < 0 < s.max()):
        return out
    offs = np.flatnonzero(s)
    nxt = np.append(offs[1:], offs[0] + m)
    change = s[offs] != s[nxt % m]
    direct = offs[change & (nxt == offs + 1)]
    slots: dict = {}
    if len(direct):
        mask, X = plane_crossings(C[direct], C[(direct + 1) % m], f.axis, f.offset, tol=0.0)
        ok = mask & _within(X, f)
        slots = {int(a): X[i] for i, a in enumerate(direct) if ok[i]}
    for a, b in zip(offs[change], nxt[change]):
        if b == a + 1:
            if int(a) in slots:
                out.append((slots[int(a)], None))
            continue
        for i in range(a + 1, b):
            w = i % m
            if _within(C[w : w + 1], f)[0]:
                out.append((C[w], w))
                break
    return out


def _is_member(x: np.ndarray, pts: np.ndarray) -> bool:
    if not len(pts):
        return False
    tol = 1e-9 * max(1.0, float(np.abs(x).max()))
    return bool(np.any(np.all(np.abs(pts - x) <= tol, axis=1)))


def adaptive_grid(f: Facet, r: float, crossings: int) -> np.ndarray:
    """Grid allowed by the adaptive predicate on a negative-level facet.

    With k crossings the facet may use g cells, 2^{d-1} <= g <= r^{2(d-1)}/k,
    taken here as the largest dyadic grid inside that budget.
    """
    d = f.d
    budget = r ** (2 * (d - 1)) / max(crossings, 1)
    per_axis = 2 ** max(1, int(math.floor(math.log2(max(budget, 1.0)) / (d - 1))))
    rows = per_axis
    if not f.horizontal and f.extended:
        rows = int(round(per_axis * (f.hi[-1] - f.lo[-1]) / (f.z_top - f.lo[-1])))
    return _grid(f.lo, f.hi, f.axis, per_axis, False, z_counts=None if f.horizontal else rows)


@dataclass
class Violation:
    facet: int
    kind: str  # "off-portal" | "overused" | "adaptive"
    point: np.ndarray


@dataclass
class SimplicityReport:
    fixed_ok: bool
    adaptive_ok: bool
    violations: list = field(default_factory=list)
    crossings: dict = field(default_factory=dict)  # facet id -> count

    @property
    def ok(self) -> bool:
        return self.fixed_ok

    def violating_facets(self, kind: Optional[str] = None) -> list:
        return sorted({v.facet for v in self.violations if kind is None or v.kind == kind})


def check_r_simple(tour, tree: ShiftedTree, portals: Layout, r: float) -> SimplicityReport:
    """Check both the fixed-grid predicate (portal points, each used at most twice
    per facet) and the adaptive-grid predicate on negative-level facets."""
    C = tour_coords(tour)
    viol, counts = [], {}
    for f, ps in portals:
        hits = passages(C, f)
        if not hits:
            continue
        counts[f.id] = len(hits)
        used: dict = {}
        allowed = portals.plane_portals(f)
        for x, _ in hits:
            if not _is_member(x, allowed):
                viol.append(Violation(f.id, "off-portal", x))
            else:
                key = tuple(np.round(x, 9))
                used[key] = used.get(key, 0) + 1
        for key, c in used.items():
            if c > 2:
                viol.append(Violation(f.id, "overused", np.array(key)))
        if f.kind == NEG:
            others = [q.points for g, q in portals if g is not f and g.axis == f.axis and abs(g.offset - f.offset) <= 1e-12 * max(1.0, abs(f.offset))]
            grid = np.vstack([adaptive_grid(f, r, len(hits))] + others)
            for x, _ in hits:
                if not _is_member(x, grid):
                    viol.append(Violation(f.id, "adaptive", x))
    fixed_ok = all(v.kind == "adaptive" for v in viol)
    kinds = {f.id: f.kind for f in portals.facets}
    adaptive_ok = all(v.kind == "off-portal" and kinds[v.facet] == NEG for v in viol)
    return SimplicityReport(fixed_ok, adaptive_ok, viol, counts)


def top_crossings(tour, portals: Layout) -> int:
    """Crossings with Top facets of non-negative-level cells."""
    C = tour_coords(tour)
    return sum(len(passages(C, f)) for f in portals.facets if f.kind == TOP and f.level >= 0)


# ---------------------------------------------------------------- patching


@dataclass
class PatchReport:
    shift: tuple
    original_length: float
    patched_length: float
    crossings_before: dict
    crossings_after: dict
    weighted_sum: float
    snapped: int
    repaired: int
    max_detour: float
    tour: np.ndarray

    @property
    def relative_cost(self) -> float:
        return (self.patched_length - self.original_length) / self.original_length


def _piece_crossings(C: np.ndarray, portals: Layout):
    """Per piece index, list of (distance from start, facet, portal set, crossing point).

    The portal set is None for crossings that already sit on a portal.
    """
    A, B = _pieces(C)
    out: dict = {}
    planes: dict = {}
    for f, ps in portals:
        key = (f.axis, f.offset)
        if key not in planes:
            planes[key] = plane_crossings(A, B, f.axis, f.offset, tol=SIDE_TOL * max(1.0, abs(f.offset)))
        mask, X = planes[key]
        if not mask.any():
            continue
        idx = np.flatnonzero(mask)
        inside = _within(X[idx], f)
        allowed = portals.plane_portals(f)
        for i, x in zip(idx[inside], X[idx][inside]):
            t = float(dist_rows(A[i : i + 1], x[None, :])[0])
            if _is_member(x, allowed):
                # already on a portal: pin it as a waypoint so repairs see it
                x = allowed[int(np.argmin(np.abs(allowed - x).sum(axis=1)))]
                out.setdefault(int(i), []).append((t, f, None, x))
            else:
                out.setdefault(int(i), []).append((t, f, ps, x))
    return out


def _snap_once(C: np.ndarray, portals: Layout):
    found = _piece_crossings(C, portals)
    if not found:
        return C, 0, 0.0
    rows, snapped, worst = [], 0, 0.0
    for i in range(len(C)):
        rows.append(C[i])
        for t, f, ps, x in sorted(found.get(i, []), key=lambda e: e[0]):
            if ps is None:
                if not np.array_equal(rows[-1], x):
                    rows.append(x.copy())
                continue
            if not len(ps):
                raise DomainError(f"facet {f.id} has no portals")
            D = pairwise_dist(x[None, :], ps.points)[0]
            j = int(np.argmin(D))
            worst = max(worst, float(D[j]))
            rows.append(ps.points[j].copy())
            snapped += 1
    return np.array(rows), snapped, worst


def _snap_all(C: np.ndarray, portals: Layout, max_rounds: int = 8):
    total, worst = 0, 0.0
    for _ in range(max_rounds):
        C, snapped, w = _snap_once(C, portals)
        total += snapped
        worst = max(worst, w)
        if not snapped:
            break
    return C, total, worst


def _overused(C: np.ndarray, portals: Layout) -> list:
    bad = []
    for f, ps in portals:
        used: dict = {}
        for _, w in passages(C, f):
            if w is not None:
                key = tuple(np.round(C[w], 12))
                used[key] = used.get(key, 0) + 1
        bad += [(key, f) for key, c in used.items() if c > 2]
    return bad


def _merge_portal_visits(C: np.ndarray):
    """Index walk where repeated visits to one portal share a waypoint id."""
    keys: dict = {}
    walk = []
    W = []
    for c in C:
        k = tuple(np.round(c, 12))
        if k not in keys:
            keys[k] = len(W)
            W.append(c)
        walk.append(keys[k])
    return np.array(W), walk, keys


SHIELD_CANDIDATES = 6


def _violation_count(C: np.ndarray, portals: Layout) -> int:
    n = 0
    for f, _ in portals:
        used: dict = {}
        allowed = portals.plane_portals(f)
        for x, _ in passages(C, f):
            if not _is_member(x, allowed):
                n += 1
            key = tuple(np.round(x, 12))
            used[key] = used.get(key, 0) + 1
        n += sum(c - 2 for c in used.values() if c > 2)
    return n


def _shield(C: np.ndarray, portals: Layout, key: tuple, f: Facet) -> np.ndarray:
    """Move one crossing of f away from the portal at ``key``.

    Reordering cannot always help at a corner (a loop entering and leaving
    through opposite quadrants). Instead the tail of a loop that crosses at
    the corner detours through a nearby portal of the same plane, which then
    takes that crossing. Candidates are tried nearest first, new crossings of
    the detour are snapped, and a trial is kept only if the walk has fewer
    violations afterwards.
    """
    v = np.array(key)
    s = _side(C[:, f.axis], f.offset)
    hits = [w for x, w in passages(C, f) if w is not None and np.allclose(C[w], v, atol=1e-12, rtol=0)]
    P = portals.plane_portals(f)
    P = np.unique(P[_within(P, f) & np.any(np.abs(P - v) > 1e-12, axis=1)], axis=0)
    if not hits or not len(P):
        return C
    order = np.argsort(pairwise_dist(v[None, :], P)[0])[:SHIELD_CANDIDATES]
    base = _violation_count(C, portals)
    m = len(C)
    for w in hits:
        a = next((a % m for a in range(w - 1, w - m, -1) if s[a % m] != 0), None)
        if a is None:
            continue
        for j in order:
            trial = _snap_all(np.insert(C, a + 1, P[j], axis=0), portals)[0]
            if _violation_count(trial, portals) < base:
                return trial
    return C


def snap_and_patch(
    tour,
    tree: ShiftedTree,
    portals: Layout,
    r: float,
    max_rounds: int = 8,
) -> PatchReport:
    """Reroute every off-portal facet crossing through the nearest portal, then
    cut crossings at any portal used three or more times down to two by
    reordering the sub-loops through that portal (zero added length).
    A corner portal is repaired against every facet through it at once."""
    C0 = tour_coords(tour)
    before = {f.id: len(passages(C0, f)) for f in portals.facets}
    before = {k: v for k, v in before.items() if v}
    C, total, worst = _snap_all(C0, portals, max_rounds)
    repaired = 0
    for _ in range(4):
        bad = _overused(C, portals)
        if not bad:
            break
        W, walk, keys = _merge_portal_visits(C)
        for key in sorted({key for key, _ in bad}):
            v = keys[key]
            through = [f for f in portals.facets if _claims(W[v], f)]
            walk = repair_corner(W, walk, v, through, SIDE_TOL, lambda w, f: _claims(W[w], f))
            repaired += 1
        C = W[walk]
    for _ in range(4):
        bad = _overused(C, portals)
        if not bad:
            break
        for key, f in bad:
            C = _shield(C, portals, key, f)
            repaired += 1
    after = {f.id: len(passages(C, f)) for f in portals.facets}
    after = {k: v for k, v in after.items() if v}
    return PatchReport(
        shift=(tuple(tree.shift.a_x), tree.shift.a_z),
        original_length=closed_length(C0),
        patched_length=closed_length(C),
        crossings_before=before,
        crossings_after=after,
        weighted_sum=weighted_crossing_sum(C0, tree),
        snapped=total,
        repaired=repaired,
        max_detour=worst,
        tour=C,
    )


def oracle_tour(tree: ShiftedTree) -> np.ndarray:
    """Optimal tour of the tree's points as a coordinate walk."""
    _, order = exact_tsp(tree.points)
    return tree.points[order]


def harness(prep, shifts: Sequence, r: float, c_g: float = DEFAULT_CG) -> list:
    """Patch the oracle tour under each shift; one report per shift."""
    _, order = exact_tsp(prep.perturbed)
    reports = []
    for a in shifts:
        tree = prep.tree(a)
        C = tree.points[order]
        reports.append(snap_and_patch(C, tree, layout(tree, r, c_g), r))
    return reports
