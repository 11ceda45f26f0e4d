"""Portal-respecting TSP over a shifted hybrid tree.

Two engines share the crossing model (tours cross sibling facets only at
portals, each portal used at most twice):

* :class:`PortalGraph` – the production engine.  Waypoints are the input
  points and all portals; an edge joins two waypoints lying in the closure of
  a common region (leaf or compressed annulus) whenever the geodesic between
  them crosses no facet off-portal.  The optimum portal-respecting tour is a
  shortest-path TSP on this graph, solved exactly by Held-Karp.
* the table DP (:func:`solve_leaf`, :func:`combine`,
  :func:`reduce_representative`, :func:`run_table_dp`) – bottom-up over
  cells with matchings on boundary portals; exponential in the portal budget,
  used as a reference on tiny budgets.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .hgeom import DomainError, HPoint, as_array, dist_rows, geodesic_peak, pairwise_dist, plane_crossings
from .hybridtree import Prepared, Shift, ShiftedTree, prepare
from .portals import DEFAULT_CG, Facet, all_facets, place

HELD_KARP_LIMIT = 13
# Mean-over-shifts DP length <= (1 + APPROX_CONST / r) * OPT on ball(2) instances
# with n = 8, c_g = 1; worst of tools/calibrate_tsp.py (0.172) +25%.
APPROX_CONST = 0.215
DEFAULT_BMAX = 10
GEOM_TOL = 1e-11  # extents and boxes
# Side-of-plane tests. Portals sit on their planes to rounding, input points are
# perturbed off every plane by mu = 1e-9*delta, which must stay on its own side.
PLANE_TOL = 1e-14


class ResourceCapExceeded(RuntimeError):
    pass


# ---------------------------------------------------------------- Held-Karp


def held_karp(D: np.ndarray):
    """Exact shortest Hamiltonian cycle on a distance matrix; returns (cost, order)."""
    n = len(D)
    if n < 2:
        raise DomainError("need at least two points")
    if n == 2:
        return float(D[0, 1] + D[1, 0]), [0, 1]
    m = n - 1
    full = 1 << m
    dp = np.full((full, m), np.inf)
    parent = np.full((full, m), -1, dtype=np.int64)
    sub = D[1:, 1:]
    for j in range(m):
        dp[1 << j, j] = D[0, j + 1]
    for mask in range(1, full):
        row = dp[mask]
        if not np.isfinite(row).any():
            continue
        cand = row[:, None] + sub  # from j to k
        best_j = np.argmin(cand, axis=0)
        best = cand[best_j, np.arange(m)]
        for k in range(m):
            if mask >> k & 1:
                continue
            nm = mask | (1 << k)
            if best[k] < dp[nm, k]:
                dp[nm, k] = best[k]
                parent[nm, k] = best_j[k]
    last = dp[full - 1] + D[1:, 0]
    j = int(np.argmin(last))
    cost = float(last[j])
    order, mask = [], full - 1
    while j >= 0:
        order.append(j + 1)
        pj = int(parent[mask, j])
        mask ^= 1 << j
        j = pj
    return cost, [0] + order[::-1]


def two_opt(D: np.ndarray, order: list) -> list:
    """2-opt local search used beyond the Held-Karp size limit."""
    order = list(order)
    n = len(order)
    improved = True
    while improved:
        improved = False
        for i in range(n - 1):
            for j in range(i + 2, n if i else n - 1):
                a, b = order[i], order[i + 1]
                c, e = order[j], order[(j + 1) % n]
                if D[a, c] + D[b, e] < D[a, b] + D[c, e] - 1e-12:
                    order[i + 1 : j + 1] = order[i + 1 : j + 1][::-1]
                    improved = True
    return order


# ---------------------------------------------------------------- tours


@dataclass
class Tour:
    """Closed walk through all points; waypoints are points then portals."""

    waypoints: np.ndarray
    n_points: int
    walk: list
    length: float
    exact: bool = True
    uses: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    def point_order(self) -> list:
        seen, out = set(), []
        for w in self.walk:
            if w < self.n_points and w not in seen:
                seen.add(w)
                out.append(w)
        return out

    def coords(self) -> np.ndarray:
        return self.waypoints[self.walk]

    def hpoints(self) -> list:
        return [HPoint.from_coords(c) for c in self.coords()]

    def max_portal_use(self) -> int:
        return max(self.uses.values(), default=0)


def walk_length(W: np.ndarray, walk: Sequence[int]) -> float:
    A = W[list(walk)]
    return float(dist_rows(A, np.roll(A, -1, axis=0)).sum())


def _side(v: float, c: float, tol: float = PLANE_TOL) -> int:
    tol = tol * max(1.0, abs(c))
    return 0 if abs(v - c) <= tol else (1 if v > c else -1)


def _in_extent(p, f: Facet) -> bool:
    tol = GEOM_TOL * max(1.0, float(np.abs(f.hi).max()))
    return bool(np.all(p >= f.lo - tol) and np.all(p <= f.hi + tol))


def portal_uses(W: np.ndarray, walk: list, facets: list, portal_facets: dict) -> dict:
    """Crossings of each facet attributed to portals: (waypoint, facet) -> count.

    A crossing is a change of side between consecutive off-plane waypoints;
    it is attributed to the first waypoint in between that lies on the facet.
    """
    uses: dict = {}
    relevant = {f for fs in portal_facets.values() for f in fs}
    m = len(walk)
    for fid in relevant:
        f = facets[fid]
        sides = [_side(W[w][f.axis], f.offset) for w in walk]
        offs = [i for i, s in enumerate(sides) if s]
        if not offs:
            continue
        for a, b in zip(offs, offs[1:] + [offs[0] + m]):
            if sides[a] == sides[b % m]:
                continue
            for i in range(a + 1, b):
                w = walk[i % m]
                if fid in portal_facets.get(w, ()) and _in_extent(W[w], f):
                    uses[(w, fid)] = uses.get((w, fid), 0) + 1
                    break
    return uses


def _loops(walk: list, v: int) -> list:
    pos = [i for i, w in enumerate(walk) if w == v]
    rot = walk[pos[0] :] + walk[: pos[0]]
    pos = [i for i, w in enumerate(rot) if w == v] + [len(rot)]
    return [rot[a:b] for a, b in zip(pos, pos[1:])]


def _reverse_loop(loop: list) -> list:
    return [loop[0]] + loop[1:][::-1]


def repair_portal(W: np.ndarray, walk: list, v: int, f: Facet, tol: float = PLANE_TOL) -> list:
    """Reorder/reverse the closed sub-loops through v so at most two cross f at v."""
    loops = _loops(walk, v)
    groups = {"AA": [], "BB": [], "AB": [], "N": []}
    for lp in loops:
        sides = [_side(W[w][f.axis], f.offset, tol) for w in lp[1:]]
        offs = [s for s in sides if s]
        if not offs:
            groups["N"].append(lp)
            continue
        a, b = offs[0], offs[-1]
        if a == b:
            groups["AA" if a < 0 else "BB"].append(lp)
        else:
            groups["AB"].append(lp if a < 0 else _reverse_loop(lp))
    mixed = groups["AB"]
    seq = list(groups["AA"])
    if mixed:
        seq.append(mixed[0])
    seq += groups["BB"]
    for i, lp in enumerate(mixed[1:]):
        seq.append(_reverse_loop(lp) if i % 2 == 0 else lp)
    seq += groups["N"]
    return [w for lp in seq for w in lp]


CORNER_SEARCH_LIMIT = 7


def _loop_summary(W, lp: list, f: Facet, tol: float, claims):
    """(first side, last side, tail shielded) of a loop for facet f, or None if it never leaves the plane.

    A tail is shielded when a waypoint after its last off-plane point can
    take the crossing, so the crossing is not charged to the loop's start.
    """
    sides = [_side(W[w][f.axis], f.offset, tol) for w in lp[1:]]
    offs = [i for i, s in enumerate(sides) if s]
    if not offs:
        return None
    tail = any(claims(lp[1 + i], f) for i in range(offs[-1] + 1, len(sides)))
    return sides[offs[0]], sides[offs[-1]], tail


def repair_corner(W: np.ndarray, walk: list, v: int, facets: Sequence[Facet], tol: float = PLANE_TOL, claims=None) -> list:
    """Reorder/reverse the sub-loops through v so every facet in ``facets`` is crossed at v at most twice.

    A portal on a cell corner lies on several planes; fixing one plane alone
    can break another, so all orders and orientations are searched jointly.
    """
    if claims is None:
        claims = lambda w, f: _side(W[w][f.axis], f.offset, tol) == 0 and _in_extent(W[w], f)
    loops = _loops(walk, v)
    if len(loops) > CORNER_SEARCH_LIMIT:
        for f in facets:
            walk = repair_portal(W, walk, v, f, tol)
        return walk
    both = [(lp, _reverse_loop(lp)) for lp in loops]
    summ = [[[_loop_summary(W, o, f, tol, claims) for f in facets] for o in pair] for pair in both]

    def cost(seq):
        worst = 0
        for j in range(len(facets)):
            ring = [summ[i][o][j] for i, o in seq if summ[i][o][j] is not None]
            hits = sum(1 for a, b in zip(ring, ring[1:] + ring[:1]) if a[1] != b[0] and not a[2])
            worst = max(worst, hits)
        return worst

    best, best_cost = None, math.inf
    for perm in itertools.permutations(range(1, len(loops))):
        for orient in itertools.product((0, 1), repeat=len(perm)):
            seq = [(0, 0)] + list(zip(perm, orient))
            c = cost(seq)
            if c < best_cost:
                best, best_cost = seq, c
            if c <= 2:
                return [w for i, o in best for w in both[i][o]]
    return [w for i, o in best for w in both[i][o]]


def cell_crossings(W: np.ndarray, walk: list, tree: ShiftedTree) -> dict:
    """Number of boundary crossings of the tour for each tree cell."""
    C = W[walk]
    out = {}
    for nd in tree.nodes[1:]:
        lo, hi = tree.real_box(nd.cell)
        tol = GEOM_TOL * max(1.0, float(np.abs(hi).max()))
        inside = np.all((C > lo + tol) & (C < hi - tol), axis=1)
        outside = np.any((C < lo - tol) | (C > hi + tol), axis=1)
        cls = np.where(inside, 1, np.where(outside, -1, 0))
        cls = cls[cls != 0]
        if len(cls) == 0:
            out[nd.id] = 0
            continue
        out[nd.id] = int(np.count_nonzero(cls != np.roll(cls, -1)))
    return out


# ---------------------------------------------------------------- the graph


def _region_members(tree: ShiftedTree, W: np.ndarray, node) -> np.ndarray:
    lo, hi = tree.real_box(node.cell)
    tol = PLANE_TOL * max(1.0, float(np.abs(hi).max()))
    m = np.all((W >= lo - tol) & (W <= hi + tol), axis=1)
    if node.kind == "compressed":
        clo, chi = tree.real_box(tree.nodes[node.children[0]].cell)
        m &= ~np.all((W > clo + tol) & (W < chi - tol), axis=1)
    return np.flatnonzero(m)


def _reach_box(W: np.ndarray, idx: np.ndarray):
    pts = W[idx]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    width = float(np.linalg.norm(hi[:-1] - lo[:-1]))
    hi = hi.copy()
    hi[-1] = math.hypot(width, hi[-1])
    return lo, hi


def valid_pieces(P: np.ndarray, Q: np.ndarray, facets: Sequence[Facet]) -> np.ndarray:
    """True where the geodesic PQ crosses none of the facets (inside their extents)."""
    ok = np.ones(len(P), dtype=bool)
    for f in facets:
        mask, X = plane_crossings(P, Q, f.axis, f.offset, tol=PLANE_TOL * max(1.0, abs(f.offset)))
        if not mask.any():
            continue
        tol = GEOM_TOL * max(1.0, float(np.abs(f.hi).max()))
        Xm = X[mask]
        hit = np.all((Xm >= f.lo - tol) & (Xm <= f.hi + tol), axis=1)
        bad = np.flatnonzero(mask)[hit]
        ok[bad] = False
    return ok


class PortalGraph:
    """Waypoint graph for one shifted tree; portals are placed once at ``r_max``."""

    def __init__(
        self,
        tree: ShiftedTree,
        r_max: float,
        c_g: float = DEFAULT_CG,
        r_values: Sequence[float] = (),
        extra: Optional[np.ndarray] = None,
    ):
        self.tree = tree
        self.c_g = c_g
        self.r_max = r_max
        self.facets = all_facets(tree)
        self.n = len(tree.points)
        coords = [tree.points]
        if extra is not None and len(extra):
            coords.append(np.asarray(extra, dtype=float))
        n = self.base = sum(len(c) for c in coords)
        keys: dict = {}
        self.portal_facets: dict = {}
        self.min_r: list = []
        rs = sorted(set(list(r_values) + [r_max]))
        for f in self.facets:
            for r in rs:
                ps = place(f, r, c_g)
                for p in ps.points:
                    key = tuple(np.round(p, 12))
                    wid = keys.get(key)
                    if wid is None:
                        wid = n + len(keys)
                        keys[key] = wid
                        coords.append(p[None, :])
                        self.min_r.append(r)
                    else:
                        self.min_r[wid - n] = min(self.min_r[wid - n], r)
                    fs = self.portal_facets.setdefault(wid, [])
                    if f.id not in fs:
                        fs.append(f.id)
        self.W = np.vstack(coords)
        self.min_r = np.array(self.min_r, dtype=float)
        self._register_shared()
        self._build_edges()

    def _register_shared(self):
        # a facet corner portal also lies on the neighbouring facets through it
        Wp = self.W[self.base :]
        for f in self.facets:
            tol = GEOM_TOL * max(1.0, float(np.abs(f.hi).max()))
            on = np.abs(Wp[:, f.axis] - f.offset) <= PLANE_TOL * max(1.0, abs(f.offset))
            on &= np.all((Wp >= f.lo - tol) & (Wp <= f.hi + tol), axis=1)
            for i in np.flatnonzero(on):
                fs = self.portal_facets[self.base + int(i)]
                if f.id not in fs:
                    fs.append(f.id)

    def _build_edges(self):
        W, tree = self.W, self.tree
        boxes = [(f.lo, f.hi) for f in self.facets]
        pairs = []
        for node in tree.regions():
            idx = _region_members(tree, W, node)
            if len(idx) < 2:
                continue
            rlo, rhi = _reach_box(W, idx)
            near = [
                f
                for f, (lo, hi) in zip(self.facets, boxes)
                if np.all(lo <= rhi + GEOM_TOL) and np.all(hi >= rlo - GEOM_TOL)
            ]
            iu, ju = np.triu_indices(len(idx), 1)
            a, b = idx[iu], idx[ju]
            ok = valid_pieces(W[a], W[b], near)
            pairs.append(a[ok].astype(np.int64) * len(W) + b[ok])
        keys = np.unique(np.concatenate(pairs)) if pairs else np.zeros(0, dtype=np.int64)
        E = np.stack([keys // len(W), keys % len(W)], axis=1)
        self.edges = E
        self.weights = dist_rows(W[E[:, 0]], W[E[:, 1]]) if len(E) else np.zeros(0)

    def active(self, r: float) -> np.ndarray:
        act = np.ones(len(self.W), dtype=bool)
        act[self.base :] = self.min_r <= r
        return act

    def adjacency(self, r: float):
        """Sparse weighted adjacency of the waypoints active at r."""
        if r > self.r_max:
            raise DomainError("r exceeds the placement radius of this graph")
        act = self.active(r)
        E, w = self.edges, self.weights
        keep = act[E[:, 0]] & act[E[:, 1]]
        E, w = E[keep], np.maximum(w[keep], 1e-300)
        V = len(self.W)
        return coo_matrix((w, (E[:, 0], E[:, 1])), shape=(V, V)).tocsr(), act, len(E)

    def solve(self, r: Optional[float] = None, b_max: Optional[int] = DEFAULT_BMAX) -> Tour:
        r = self.r_max if r is None else r
        G, act, n_edges = self.adjacency(r)
        n = self.n
        dist, pred = dijkstra(G, directed=False, indices=np.arange(n), return_predecessors=True)
        D = dist[:, :n]
        if not np.isfinite(D).all():
            raise ResourceCapExceeded("portal graph is disconnected at this r")
        exact = n <= HELD_KARP_LIMIT
        if exact:
            _, order = held_karp(D)
        else:
            order = two_opt(D, _nearest_neighbour(D))
        walk = []
        for a, b in zip(order, order[1:] + order[:1]):
            path = [b]
            while path[-1] != a:
                path.append(int(pred[a, path[-1]]))
            walk += path[::-1][:-1]
        walk = self._enforce_portal_rule(walk)
        uses = portal_uses(self.W, walk, self.facets, self.portal_facets)
        stats = {"r": r, "waypoints": int(act.sum()), "edges": n_edges, "facets": len(self.facets)}
        tour = Tour(self.W, n, walk, walk_length(self.W, walk), exact, uses, stats)
        if b_max is not None:
            cc = cell_crossings(self.W, walk, self.tree)
            worst = max(cc.values(), default=0)
            stats["max_boundary_portals"] = worst
            if worst > b_max:
                raise ResourceCapExceeded(f"a cell boundary needs {worst} portal crossings > B_max={b_max}")
        return tour

    def _enforce_portal_rule(self, walk: list) -> list:
        for _ in range(4):
            uses = portal_uses(self.W, walk, self.facets, self.portal_facets)
            bad = [(v, f) for (v, f), c in uses.items() if c > 2]
            if not bad:
                break
            claims = lambda w, f: f.id in self.portal_facets.get(w, ()) and _in_extent(self.W[w], f)
            for v in sorted({v for v, _ in bad}):
                fs = [self.facets[f] for f in self.portal_facets[v]]
                walk = repair_corner(self.W, walk, v, fs, claims=claims)
        return walk


def _nearest_neighbour(D: np.ndarray) -> list:
    n = len(D)
    order, left = [0], set(range(1, n))
    while left:
        nxt = min(left, key=lambda j: D[order[-1], j])
        order.append(nxt)
        left.remove(nxt)
    return order


# ---------------------------------------------------------------- entry point


@dataclass
class Instance:
    points: list
    eps: float
    r: float

    @property
    def d(self) -> int:
        return self.points[0].d

    def prepared(self) -> Prepared:
        if not hasattr(self, "_prep"):
            object.__setattr__(self, "_prep", prepare(self.points, self.eps))
        return self._prep


def run_tsp(inst: Instance, shift: Optional[Shift] = None, c_g: float = DEFAULT_CG, b_max: Optional[int] = DEFAULT_BMAX) -> Tour:
    """Portal-respecting optimum for one shift (identity shift by default)."""
    if len(inst.points) < 2:
        raise DomainError("need at least two points")
    prep = inst.prepared()
    shift = shift or Shift.identity(prep.d)
    if len(inst.points) == 2:
        # the only tour is the doubled geodesic; no facet discipline can shorten it
        W = as_array(prep.perturbed)
        return Tour(W, 2, [0, 1], walk_length(W, [0, 1]), True, {}, {"r": inst.r, "waypoints": 2, "edges": 1})
    graph = PortalGraph(prep.tree(shift), inst.r, c_g)
    return graph.solve(inst.r, b_max)


# ---------------------------------------------------------------- table DP
#
# Endpoint labels are hashable; a portal used twice on one side contributes
# two labels (portal, 0) and (portal, 1).  A matching is a frozenset of
# 2-element frozensets.


def matching(pairs) -> frozenset:
    return frozenset(frozenset(p) for p in pairs)


def matching_support(M: frozenset) -> frozenset:
    return frozenset(x for pair in M for x in pair)


def all_matchings(B: Sequence) -> list:
    """Every perfect matching on the labels B (|B| even)."""
    B = list(B)
    if len(B) % 2:
        raise DomainError("odd number of endpoints")
    if not B:
        return [frozenset()]
    first, rest = B[0], B[1:]
    out = []
    for i, other in enumerate(rest):
        for sub in all_matchings(rest[:i] + rest[i + 1 :]):
            out.append(sub | {frozenset((first, other))})
    return out


def _sort_key(M: frozenset):
    return sorted(tuple(sorted(map(repr, p))) for p in M)


def _components(nodes, edges) -> list:
    parent = {v: v for v in nodes}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    for a, b in edges:
        parent[find(a)] = find(b)
    groups: dict = {}
    for v in nodes:
        groups.setdefault(find(v), []).append(v)
    return list(groups.values())


def fits(M1: frozenset, M2: frozenset) -> bool:
    """True iff M1 and M2 on the same support form one Hamiltonian cycle."""
    B = matching_support(M1)
    if B != matching_support(M2):
        raise DomainError("matchings on different endpoint sets")
    if not B:
        return False
    # every vertex has degree two in M1 + M2, so it is one cycle iff connected
    edges = [tuple(p) for p in M1] + [tuple(p) for p in M2]
    return len(_components(B, edges)) == 1


def opt_against(M: frozenset, R: dict) -> float:
    """min cost over entries of R that fit the complement M."""
    best = math.inf
    for M2, entry in R.items():
        cost = entry[0] if isinstance(entry, tuple) else entry
        if cost < best and fits(M, M2):
            best = cost
    return best


def reduce_representative(R: dict) -> dict:
    """Keep, for every complement matching, a cheapest fitting partner (ties by matching order)."""
    if not R:
        return {}
    B = sorted(matching_support(next(iter(R))), key=repr)
    ranked = sorted(R.items(), key=lambda kv: (kv[1][0] if isinstance(kv[1], tuple) else kv[1], _sort_key(kv[0])))
    keep = {}
    for comp in all_matchings(B):
        for M, entry in ranked:
            if fits(comp, M):
                keep[M] = entry
                break
    return keep


def _path_cost(dist, seq) -> float:
    return sum(dist(a, b) for a, b in zip(seq, seq[1:]))


def solve_leaf(points: Sequence, ends: dict, M: frozenset, dist=None):
    """Cheapest path system realising M (labels -> coordinates in ``ends``) covering all points.

    Returns ``(cost, paths)`` where each path is a list of coordinates.  With
    M empty the points are closed into a single cycle (the root convention).
    """
    from .hgeom import hyp_distance

    dist = dist or (lambda a, b: hyp_distance(_hp(a), _hp(b)))
    pts = list(points)
    pairs = sorted((tuple(sorted(p, key=repr)) for p in M), key=repr)
    if not pairs:
        if not pts:
            return 0.0, []
        if len(pts) == 1:
            return 0.0, [[pts[0]]]
        best = (math.inf, None)
        for perm in itertools.permutations(pts[1:]):
            seq = [pts[0], *perm, pts[0]]
            c = _path_cost(dist, seq)
            if c < best[0] - 1e-15:
                best = (c, [seq])
        return best
    k = len(pairs)
    best = (math.inf, None)
    for perm in itertools.permutations(range(len(pts))):
        for cuts in itertools.combinations_with_replacement(range(len(pts) + 1), k - 1):
            bounds = (0, *cuts, len(pts))
            paths, total = [], 0.0
            for (a, b), lo, hi in zip(pairs, bounds, bounds[1:]):
                seq = [ends[a], *[pts[i] for i in perm[lo:hi]], ends[b]]
                total += _path_cost(dist, seq)
                paths.append(seq)
            if total < best[0] - 1e-15:
                best = (total, paths)
    return best


def _hp(c):
    return c if isinstance(c, HPoint) else HPoint.from_coords(c)


def _merge(A: "RepTable", C: "RepTable", glue_portals: set, allowed_outer, root: bool, b_max: int) -> "RepTable":
    """Glue two tables on the given portals (copy c to copy c, at most 2 copies)."""
    out = RepTable(A.cell, has_points=A.has_points or C.has_points)
    order = sorted(glue_portals)

    def signature(B):
        cnt = {}
        for p, _ in B:
            cnt[p] = cnt.get(p, 0) + 1
        return cnt, tuple(cnt.get(p, 0) for p in order)

    by_sig: dict = {}
    for B, R in C.sets.items():
        cnt, sig = signature(B)
        by_sig.setdefault(sig, []).extend((B, M, e, cnt) for M, e in R.items())
    for Ba, Ra in A.sets.items():
        ca, sig = signature(Ba)
        for (Ma, xa), (Bc, Mc, xc, cc) in itertools.product(Ra.items(), by_sig.get(sig, ())):
            if len(Ba) + len(Bc) - 2 * sum(sig) > b_max:
                continue
            cycles = xa[2] + xc[2]
            glue = [((0, (p, c)), (1, (p, c))) for p in glue_portals for c in range(ca.get(p, 0))]
            nodes, edges = [], list(glue)
            for side, M in ((0, Ma), (1, Mc)):
                for pair in M:
                    a, b = tuple(pair)
                    nodes += [(side, a), (side, b)]
                    edges.append(((side, a), (side, b)))
            glued = {v for e in glue for v in e}
            outer = [v for v in nodes if v not in glued]
            if allowed_outer is not None and any(not allowed_outer(v[1][0]) for v in outer):
                continue
            paths = []
            for comp in _components(nodes, edges):
                ends = [v for v in comp if v not in glued]
                if ends:
                    paths.append(ends)
                else:
                    cycles += 1
            if cycles > 1 or (cycles and (outer or not root)):
                continue
            if len(outer) > b_max:
                continue
            rename, seen = {}, {}
            for v in sorted(outer, key=repr):
                p = v[1][0]
                rename[v] = (p, seen.get(p, 0))
                seen[p] = seen.get(p, 0) + 1
            Mout = frozenset(frozenset(rename[v] for v in ends) for ends in paths)
            Bout = tuple(sorted(rename.values(), key=repr))
            cost = xa[0] + xc[0]
            slot = out.sets.setdefault(Bout, {})
            if Mout not in slot or cost < slot[Mout][0] - 1e-15:
                slot[Mout] = (cost, ((Ba, Ma), (Bc, Mc)), cycles)
    return out


def combine(
    cell: int,
    children: Sequence["RepTable"],
    shared: dict,
    root: bool = False,
    b_max: int = DEFAULT_BMAX,
    allowed_outer=None,
) -> "RepTable":
    """Glue child tables along shared portals.

    ``shared`` maps a portal id to the pair of child indices whose common
    facet carries it; each such portal is used 0, 1 or 2 times, and copy c on
    one side is glued to copy c on the other.  Entries are
    ``(cost, backpointer, closed)`` where ``closed`` flags a finished cycle,
    which is only acceptable as the whole tour at the root.  Endpoints left
    unglued must satisfy ``allowed_outer`` (a predicate on portal ids).
    """
    acc = children[0]
    group = {0}
    for k in range(1, len(children)):
        portals = {p for p, (i, j) in shared.items() if (i in group and j == k) or (j in group and i == k)}
        last = k == len(children) - 1
        pending = {p for p, (i, j) in shared.items() if (i > k or j > k)}

        def ok(p, pending=pending, last=last):
            if p in pending:
                return True
            return allowed_outer is None or allowed_outer(p)

        acc = _merge(acc, children[k], portals, ok, root and last, b_max + 2 * len(pending))
        group.add(k)
    out = RepTable(cell, has_points=acc.has_points)
    for B, R in acc.sets.items():
        if len(B) > b_max:
            continue
        out.sets[B] = reduce_representative(R) if B else R
    if root:
        out.sets = {B: R for B, R in out.sets.items() if not B}
    return out


@dataclass
class RepTable:
    """Representative sets of one cell: B -> {matching: (cost, backpointer, closed)}."""

    cell: int
    sets: dict = field(default_factory=dict)
    has_points: bool = False

    def size(self) -> int:
        return sum(len(v) for v in self.sets.values())


def _multisets(portals: Sequence[int], max_ends: int):
    """Endpoint label tuples using each portal at most twice, even size <= max_ends."""
    portals = sorted(portals)
    out = []

    def rec(i, acc):
        if len(acc) % 2 == 0:
            out.append(tuple(acc))
        if i == len(portals):
            return
        for j in range(i, len(portals)):
            p = portals[j]
            for c in (1, 2):
                if len(acc) + c > max_ends:
                    break
                rec(j + 1, acc + [(p, k) for k in range(c)])

    rec(0, [])
    return out


def _on_boundary(W: np.ndarray, lo, hi) -> np.ndarray:
    tol = GEOM_TOL * max(1.0, float(np.abs(hi).max()))
    inside = np.all((W >= lo - tol) & (W <= hi + tol), axis=1)
    face = np.any((np.abs(W - lo) <= tol) | (np.abs(W - hi) <= tol), axis=1)
    return inside & face


def run_table_dp(graph: PortalGraph, r: Optional[float] = None, max_ends: int = 4) -> float:
    """Optimum over the cell-by-cell table DP (reference engine for tiny budgets)."""
    tree, W, n = graph.tree, graph.W, graph.n
    r = graph.r_max if r is None else r
    G, act, _ = graph.adjacency(r)

    def region_table(node) -> RepTable:
        idx = _region_members(tree, W, node)
        idx = idx[act[idx]]
        sub = G[idx][:, idx]
        D = dijkstra(sub, directed=False)
        local = {int(g): i for i, g in enumerate(idx)}
        pts = [local[g] for g in idx if g < n]
        portals = [int(g) for g in idx if g >= n]
        table = RepTable(node.id, has_points=bool(pts))
        dist = lambda a, b: D[a, b]
        for B in _multisets(portals, max_ends):
            ends = {lab: local[lab[0]] for lab in B}
            slot = {}
            for M in all_matchings(B):
                cost, _ = solve_leaf(pts, ends, M, dist)
                if math.isfinite(cost):
                    slot[M] = (cost, None, int(bool(pts) and not B))
            if slot:
                table.sets[B] = slot
        return table

    def node_table(node) -> RepTable:
        if node.kind == "leaf":
            return region_table(node)
        lo, hi = tree.real_box(node.cell)
        outer = set(np.flatnonzero(_on_boundary(W, lo, hi)).tolist())
        if node.kind == "compressed":
            child = tree.nodes[node.children[0]]
            kids = [region_table(node), node_table(child)]
            clo, chi = tree.real_box(child.cell)
            on_child = np.flatnonzero(_on_boundary(W, clo, chi) & act)
            shared = {int(p): (0, 1) for p in on_child if p >= n and p not in outer}
        else:
            children = [tree.nodes[c] for c in node.children]
            kids = [node_table(ch) for ch in children]
            where: dict = {}
            for i, ch in enumerate(children):
                clo, chi = tree.real_box(ch.cell)
                for p in np.flatnonzero(_on_boundary(W, clo, chi) & act):
                    if p >= n and p not in outer:
                        where.setdefault(int(p), []).append(i)
            shared = {p: tuple(ix) for p, ix in where.items() if len(ix) == 2}
        root = node.parent is None
        return combine(node.id, kids, shared, root=root, b_max=max_ends, allowed_outer=lambda p: p in outer)

    top = node_table(tree.root)
    entry = top.sets.get((), {}).get(frozenset())
    return entry[0] if entry else math.inf
