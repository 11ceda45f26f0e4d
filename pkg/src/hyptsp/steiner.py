"""Hyperbolic banyans, Dreyfus-Wagner and the portal-respecting Steiner tree."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix, vstack as sp_vstack, hstack as sp_hstack
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import ConvexHull, Delaunay, QhullError

from .hgeom import (
    DomainError,
    HPoint,
    _from_hyperboloid,
    _to_hyperboloid,
    as_array,
    from_klein,
    geodesic_midpoint,
    hyp_distance,
    pairwise_dist,
    to_klein,
)
from .hybridtree import Cell, Shift, level_cell_diameter, width_unit

MAX_TERMINALS = 12
COVER_THRESHOLD = 1.0  # stands in for the simplex-edge constant


class TooManyTerminals(DomainError):
    pass


# ---------------------------------------------------------------- Dreyfus-Wagner


@dataclass
class SteinerTree:
    vertices: np.ndarray  # coordinates of every vertex that may appear
    edges: list  # (i, j) index pairs into vertices
    cost: float
    terminals: list

    def is_connected(self) -> bool:
        nodes = set(self.terminals) | {v for e in self.edges for v in e}
        if not nodes:
            return True
        adj: dict = {}
        for a, b in self.edges:
            adj.setdefault(a, []).append(b)
            adj.setdefault(b, []).append(a)
        start = next(iter(nodes))
        seen, stack = {start}, [start]
        while stack:
            for u in adj.get(stack.pop(), []):
                if u not in seen:
                    seen.add(u)
                    stack.append(u)
        return seen >= nodes


def dreyfus_wagner(graph, terminals: Sequence[int]) -> SteinerTree:
    """Exact minimum Steiner tree.

    ``graph`` is either a dense metric distance matrix (complete graph whose
    weights satisfy the triangle inequality) or a scipy sparse adjacency
    matrix.  Terminals are vertex indices.
    """
    terminals = list(dict.fromkeys(int(t) for t in terminals))
    k = len(terminals)
    if k > MAX_TERMINALS:
        raise TooManyTerminals(f"{k} terminals exceed the limit of {MAX_TERMINALS}")
    dense = isinstance(graph, np.ndarray)
    V = graph.shape[0]
    if k <= 1:
        return SteinerTree(None, [], 0.0, terminals)
    root, rest = terminals[0], terminals[1:]
    m = len(rest)
    full = (1 << m) - 1
    dp = np.full((full + 1, V), np.inf)
    pred = np.full((full + 1, V), -1, dtype=np.int64)  # previous vertex on the closing path
    split = np.zeros((full + 1, V), dtype=np.int64)  # subset used at a merge vertex

    def relax(f: np.ndarray):
        if dense:
            tot = f[:, None] + graph
            src = np.argmin(tot, axis=0)
            return tot[src, np.arange(V)], src
        aug = _super_source(graph, f)
        dist, pr = dijkstra(aug, directed=False, indices=V, return_predecessors=True)
        return dist[:V], pr[:V]

    for i, t in enumerate(rest):
        f = np.full(V, np.inf)
        f[t] = 0.0
        dp[1 << i], pred[1 << i] = relax(f)
        split[1 << i] = 0
    for S in range(1, full + 1):
        if S & (S - 1) == 0:
            continue
        low = S & -S
        f = np.full(V, np.inf)
        arg = np.zeros(V, dtype=np.int64)
        A = (S - 1) & S
        while A:
            if A & low:
                cand = dp[A] + dp[S ^ A]
                better = cand < f
                f[better] = cand[better]
                arg[better] = A
            A = (A - 1) & S
        dist, pr = relax(f)
        dp[S], pred[S] = dist, pr
        split[S] = arg

    edges: list = []

    def rebuild(S: int, v: int):
        if dense:
            u = int(pred[S][v])
            if u != v:
                edges.append((u, v))
            v = u
        else:
            while pred[S][v] >= 0 and pred[S][v] != V:
                u = int(pred[S][v])
                edges.append((u, v))
                v = u
        if S & (S - 1) == 0:
            return
        A = int(split[S][v])
        rebuild(A, v)
        rebuild(S ^ A, v)

    cost = float(dp[full][root])
    if math.isfinite(cost):
        rebuild(full, root)
    edges = [(a, b) for a, b in edges if a != b]
    return SteinerTree(None, sorted({tuple(sorted(e)) for e in edges}), cost, terminals)


def _super_source(G, f: np.ndarray):
    V = G.shape[0]
    fin = np.flatnonzero(np.isfinite(f))
    w = np.maximum(f[fin], 1e-300)
    col = coo_matrix((w, (fin, np.zeros(len(fin), dtype=int))), shape=(V, 1))
    row = coo_matrix((w, (np.zeros(len(fin), dtype=int), fin)), shape=(1, V))
    top = sp_hstack([G, col])
    bottom = sp_hstack([row, csr_matrix((1, 1))])
    return sp_vstack([top, bottom]).tocsr()


# ---------------------------------------------------------------- banyan


def _hull_halfspaces(K: np.ndarray):
    """Halfspaces n.x <= b (unit n) whose intersection is the hull of K (Klein coords).

    Flat hulls are handled in their affine span, plus a pair of opposite
    halfspaces per missing direction.
    """
    c = K.mean(axis=0)
    Y = K - c
    _, sv, Vt = np.linalg.svd(Y, full_matrices=True)
    rank = int(np.sum(sv > 1e-10))
    basis, normals = Vt[:rank], Vt[rank:]
    H = []
    for nvec in normals:
        H += [(nvec, float(nvec @ c)), (-nvec, -float(nvec @ c))]
    coords = Y @ basis.T
    if rank == 1:
        u = basis[0]
        H += [(u, float(u @ c + coords.max())), (-u, -float(u @ c + coords.min()))]
    elif rank >= 2:
        try:
            hull = ConvexHull(coords)
        except QhullError:
            return H
        for eq in hull.equations:
            nvec = eq[:-1] @ basis
            norm = float(np.linalg.norm(nvec))
            H.append((nvec / norm, float((-eq[-1] + nvec @ c) / norm)))
    return H


def _hull_excess(Kx: np.ndarray, H) -> np.ndarray:
    """Largest hyperbolic distance to the supporting hyperplanes (negative = inside)."""
    if not H:
        return np.zeros(len(Kx))
    r2 = np.einsum("ij,ij->i", Kx, Kx)
    out = np.full(len(Kx), -np.inf)
    for nvec, b in H:
        s = (Kx @ nvec - b) / np.sqrt(np.maximum(1 - r2, 1e-300) * max(1 - b * b, 1e-300))
        out = np.maximum(out, np.arcsinh(s))
    return out


def _tiling_centers(level: int, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Centres of all level (<= 0) tiling cells meeting the half-space box [lo, hi]."""
    d = len(lo)
    w = width_unit(d)
    s = 2.0**level
    out = []
    for k in range(math.floor(math.log2(lo[-1])), math.floor(math.log2(hi[-1])) + 1):
        g = 2.0**k * w * s
        axes = [np.arange(math.floor(lo[i] / g), math.floor(hi[i] / g) + 1) for i in range(d - 1)]
        zs = []
        for iz in range(2 ** (-level)):
            z0, z1 = 2.0 ** (k + s * iz), 2.0 ** (k + s * (iz + 1))
            if z1 >= lo[-1] and z0 <= hi[-1]:
                zs.append(math.sqrt(z0 * z1))
        for combo in itertools.product(*axes):
            x = (np.array(combo) + 0.5) * g
            for z in zs:
                out.append(np.append(x, z))
    return np.array(out).reshape(-1, d)


def _geodesic_samples(p: np.ndarray, q: np.ndarray, step: float) -> np.ndarray:
    P, Q = HPoint.from_coords(p), HPoint.from_coords(q)
    L = hyp_distance(P, Q)
    if L == 0:
        return p[None, :]
    Xp, Xq = _to_hyperboloid(P), _to_hyperboloid(Q)
    ts = np.arange(0.0, L + 1e-12, step)
    pts = [(_from_hyperboloid((math.sinh(L - t) * Xp + math.sinh(t) * Xq) / math.sinh(L))).coords() for t in ts]
    return np.array(pts)


@dataclass
class Banyan:
    """Terminals Y followed by candidate Steiner points Q; edges are the complete graph."""

    vertices: np.ndarray
    n_terminals: int
    eps: float
    groups: dict = field(default_factory=dict)  # (a, b) -> indices of Q_ab
    spacing: dict = field(default_factory=dict)  # (a, b) -> mu_ab
    halfspaces: dict = field(default_factory=dict)

    @property
    def Q(self) -> np.ndarray:
        return self.vertices[self.n_terminals :]

    def edge_count(self) -> int:
        V = len(self.vertices)
        return V * (V - 1) // 2

    def dist(self, idx: Optional[Sequence[int]] = None) -> np.ndarray:
        A = self.vertices if idx is None else self.vertices[list(idx)]
        return pairwise_dist(A)

    def steiner(self, terminals: Sequence[int]) -> SteinerTree:
        """Dreyfus-Wagner over the terminals plus Q_ab of their diametric pair a, b.

        Every terminal lies in the ball around ab, so the optimal tree's
        Steiner points lie in C_ab and are covered by Q_ab.
        """
        terminals = sorted(set(int(t) for t in terminals))
        if len(terminals) <= 1:
            return SteinerTree(self.vertices, [], 0.0, terminals)
        Dt = self.dist(terminals)
        i, j = np.unravel_index(int(np.argmax(Dt)), Dt.shape)
        a, b = sorted((terminals[i], terminals[j]))
        idx = terminals + [q for q in self.groups.get((a, b), []) if q not in terminals]
        t = dreyfus_wagner(self.dist(idx), range(len(terminals)))
        edges = [(idx[u], idx[v]) for u, v in t.edges]
        return SteinerTree(self.vertices, edges, t.cost, terminals)


def build_banyan(Y: Sequence, eps: float) -> Banyan:
    """(1+eps)-banyan of the points Y (HPoints or an (n, d) array)."""
    A = as_array(Y)
    n, d = A.shape
    if n < 2:
        raise DomainError("banyan needs at least two points")
    if not 0 < eps:
        raise DomainError("epsilon must be positive")
    pts = [HPoint.from_coords(a) for a in A]
    K = np.array([to_klein(p) for p in pts])
    D = pairwise_dist(A)
    Q: list = []
    keys: dict = {}
    ban = Banyan(A, n, eps)
    for a, b in itertools.combinations(range(n), 2):
        if D[a, b] == 0:
            continue
        mid = geodesic_midpoint(pts[a], pts[b])
        rad = 1.5 * D[a, b]
        near = np.flatnonzero(pairwise_dist(as_array([mid]), A)[0] <= rad * (1 + 1e-12))
        H = _hull_halfspaces(K[near])
        mu = eps * D[a, b] / (2 * n)
        if mu < COVER_THRESHOLD:
            level = 0
            while level_cell_diameter(level, d) > mu:
                level -= 1
            diam = level_cell_diameter(level, d)
            sub = A[near]
            c = sub[:, :-1].mean(axis=0)
            R = float(np.sqrt(((sub[:, :-1] - c) ** 2).sum(axis=1) + sub[:, -1] ** 2).max())
            lo = np.append(sub[:, :-1].min(axis=0), sub[:, -1].min())
            hi = np.append(sub[:, :-1].max(axis=0), R)
            C = _tiling_centers(level, lo, hi)
            if len(C):
                Kc = np.array([to_klein(HPoint.from_coords(c)) for c in C])
                cand = C[_hull_excess(Kc, H) <= diam]
            else:
                cand = C
        else:
            cand = _simplex_edge_points(A[near], K[near], mu)
        ids = []
        for c in cand:
            key = tuple(np.round(c, 12))
            if key not in keys:
                keys[key] = n + len(Q)
                Q.append(c)
            ids.append(keys[key])
        ban.groups[(a, b)] = sorted(set(ids))
        ban.spacing[(a, b)] = mu
        ban.halfspaces[(a, b)] = H
    if Q:
        ban.vertices = np.vstack([A, np.array(Q)])
    return ban


def _simplex_edge_points(A: np.ndarray, K: np.ndarray, mu: float) -> np.ndarray:
    d = A.shape[1]
    edges = set()
    try:
        tri = Delaunay(K)
        for simplex in tri.simplices:
            for i, j in itertools.combinations(simplex, 2):
                edges.add((min(i, j), max(i, j)))
    except (QhullError, ValueError):
        edges = {(i, j) for i, j in itertools.combinations(range(len(A)), 2)}
    out = [A]
    for i, j in edges:
        out.append(_geodesic_samples(A[i], A[j], mu))
    return np.vstack(out).reshape(-1, d)


# ---------------------------------------------------------------- partitions


def merge_partitions(classes_a: Sequence, classes_b: Sequence) -> list:
    """Join of two partitions (classes sharing an element are merged)."""
    parent: dict = {}

    def find(x):
        parent.setdefault(x, x)
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for cls in list(classes_a) + list(classes_b):
        cls = list(cls)
        for x in cls:
            find(x)
        for x in cls[1:]:
            parent[find(x)] = find(cls[0])
    groups: dict = {}
    for x in parent:
        groups.setdefault(find(x), set()).add(x)
    return sorted((frozenset(g) for g in groups.values()), key=lambda g: sorted(map(repr, g)))


def realized_partition(edges: Sequence, labels: Sequence) -> list:
    """Partition of ``labels`` induced by connectivity of a forest."""
    return merge_partitions([[x] for x in labels], [list(e) for e in edges])


def solve_leaf_steiner(B: dict, classes: Sequence, points: Sequence, eps: float, root: bool = False):
    """Cheapest forest realising the partition ``classes`` of the portals B, covering ``points``.

    ``B`` maps portal labels to coordinates.  Every point joins one class
    (all assignments are tried); with no classes the points form one tree
    when ``root`` is set and the instance is infeasible otherwise.
    """
    labels = list(B)
    coords = [np.asarray(B[l], float) for l in labels] + [np.asarray(p.coords() if isinstance(p, HPoint) else p, float) for p in points]
    npts = len(points)
    classes = [list(c) for c in classes]
    if not classes:
        if npts and not root:
            return math.inf, []
        if npts <= 1:
            return 0.0, []
        ban = build_banyan(np.array(coords[len(labels) :]), eps)
        t = ban.steiner(range(npts))
        return t.cost, [(tuple(ban.vertices[u]), tuple(ban.vertices[v])) for u, v in t.edges]
    if len(coords) < 2:
        return 0.0, []
    ban = build_banyan(np.array(coords), eps)
    index = {l: i for i, l in enumerate(labels)}
    best = (math.inf, [])
    for assign in itertools.product(range(len(classes)), repeat=npts):
        total, forest = 0.0, []
        for ci, cls in enumerate(classes):
            terms = [index[l] for l in cls] + [len(labels) + j for j in range(npts) if assign[j] == ci]
            t = ban.steiner(terms)
            total += t.cost
            forest += [(tuple(ban.vertices[u]), tuple(ban.vertices[v])) for u, v in t.edges]
        if total < best[0]:
            best = (total, forest)
    return best


# ---------------------------------------------------------------- reference


def _tree_topologies(k: int):
    """Full Steiner topologies on terminals 0..k-1 with Steiner nodes k..2k-3."""
    if k == 2:
        yield [(0, 1)]
        return
    if k == 3:
        yield [(0, 3), (1, 3), (2, 3)]
        return
    for tree in _tree_topologies(k - 1):
        # insert terminal k-1 by subdividing an edge with a new Steiner node
        for idx, (u, v) in enumerate(tree):
            s = 2 * k - 3
            relabel = lambda x: x + 1 if x >= k - 1 else x
            edges = [(relabel(a), relabel(b)) for j, (a, b) in enumerate(tree) if j != idx]
            edges += [(relabel(u), s), (relabel(v), s), (k - 1, s)]
            yield edges


def _spread_start(KA: np.ndarray, E: np.ndarray, k: int, sweeps: int = 40) -> np.ndarray:
    """Steiner points relaxed toward their neighbours' Klein mean, as (x, log z) rows.

    Starting all Steiner points at one spot sits on the kink of the objective;
    this gives each its own place for the topology.
    """
    m = len(KA) + k - 2
    nbrs = [[] for _ in range(m)]
    for a, b in E:
        nbrs[a].append(b)
        nbrs[b].append(a)
    K = np.vstack([KA, np.repeat(KA.mean(axis=0, keepdims=True), k - 2, axis=0)])
    for _ in range(sweeps):
        for s in range(k, m):
            K[s] = K[nbrs[s]].mean(axis=0)
    out = []
    for q in K[k:]:
        c = from_klein(q).coords()
        out.append(np.append(c[:-1], math.log(c[-1])))
    return np.concatenate(out)


def _length_and_grad(X: np.ndarray, E: np.ndarray, free: int):
    """Total edge length and its gradient w.r.t. rows >= free in (x, log z) coordinates."""
    a, b = X[E[:, 0]], X[E[:, 1]]
    diff = a - b
    za, zb = a[:, -1], b[:, -1]
    A = np.einsum("ij,ij->i", diff, diff) / (4.0 * za * zb)
    total = float((2.0 * np.arcsinh(np.sqrt(A))).sum())
    dA = 1.0 / np.sqrt(A * (1.0 + A) + 1e-300)
    G = np.zeros_like(X)
    for end, other, sign in ((0, b, 1.0), (1, a, -1.0)):
        p = X[E[:, end]]
        zp, zq = p[:, -1], other[:, -1]
        g = np.empty_like(p)
        g[:, :-1] = (p[:, :-1] - other[:, :-1]) / (2.0 * zp * zq)[:, None]
        g[:, -1] = ((zp - zq) / (2.0 * zp * zq) - A / zp) * zp
        np.add.at(G, E[:, end], dA[:, None] * g)
    return total, G[free:].ravel()


def reference_steiner(P: Sequence[HPoint], polish: int = 3) -> float:
    """Geometric Steiner minimum: optimise the Steiner points of every full topology.

    The objective is geodesically convex, so each topology has no spurious
    local minima; degenerate optima (Steiner points merging into terminals)
    are reached as limits.  The MST is included as a safe upper bound.
    """
    from scipy.optimize import minimize
    from scipy.sparse.csgraph import minimum_spanning_tree

    A = as_array(P)
    k, d = A.shape
    D = pairwise_dist(A)
    best = float(minimum_spanning_tree(D).sum())
    if k <= 2:
        return best
    if k > 7:
        raise TooManyTerminals("reference limited to 7 terminals")
    centre = from_klein(np.mean([to_klein(HPoint.from_coords(a)) for a in A], axis=0)).coords()

    def unpack(v):
        S = v.reshape(k - 2, d).copy()
        S[:, -1] = np.exp(S[:, -1])
        return np.vstack([A, S])

    # the hull (hence every Steiner point) lies over the terminals' x-range and
    # below the highest geodesic between them, which is within e^diam of max z
    lz = np.log(A[:, -1])
    box = [(float(A[:, j].min()), float(A[:, j].max())) for j in range(d - 1)]
    box.append((float(lz.min()), float(lz.max() + D.max())))
    bounds = box * (k - 2)
    KA = np.array([to_klein(HPoint.from_coords(a)) for a in A])
    runs = []
    for edges in _tree_topologies(k):
        E = np.array(edges)
        fun = lambda v, E=E: _length_and_grad(unpack(v), E, k)
        starts = [np.tile(np.append(centre[:-1], math.log(centre[-1])), k - 2), _spread_start(KA, E, k)]
        for x0 in starts:
            x0 = np.clip(x0, [lo for lo, _ in bounds], [hi for _, hi in bounds])
            res = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bounds, options={"maxiter": 3000, "ftol": 1e-14, "gtol": 1e-11})
            runs.append((float(res.fun), E, res.x))
    runs.sort(key=lambda t: t[0])
    for val, E, x in runs[:polish]:
        f = lambda v, E=E: _length_and_grad(unpack(v), E, k)[0]
        res = minimize(f, x, method="Nelder-Mead", options={"xatol": 1e-11, "fatol": 1e-14, "maxiter": 6000})
        best = min(best, val, float(res.fun))
    return best


# ---------------------------------------------------------------- the scheme


@dataclass
class SteinerResult:
    tree: SteinerTree
    n_points: int
    n_steiner_candidates: int
    stats: dict = field(default_factory=dict)

    @property
    def length(self) -> float:
        return self.tree.cost

    def spans_points(self) -> bool:
        if self.n_points <= 1:
            return True
        touched = {v for e in self.tree.edges for v in e}
        return all(i in touched for i in range(self.n_points)) and self.tree.is_connected()


def run_steiner(inst, shift: Optional[Shift] = None, c_g: Optional[float] = None) -> SteinerResult:
    """Portal-respecting Steiner tree for one shift.

    The waypoint graph of the shifted tree is seeded with the banyan's
    candidate Steiner points for the diametric pair of the input, which cover
    the convex hull of all points.
    """
    from .dyntsp import PortalGraph
    from .portals import DEFAULT_CG

    if len(inst.points) < 2:
        raise DomainError("need at least two points")
    prep = inst.prepared()
    tree = prep.tree(shift or Shift.identity(prep.d))
    pts = tree.points
    n = len(pts)
    if n == 2:
        # a single geodesic; routing it through portals can only lengthen it
        d01 = float(pairwise_dist(pts)[0, 1])
        return SteinerResult(SteinerTree(pts, [(0, 1)], d01, [0, 1]), 2, 0, {"waypoints": 2, "edges": 1})
    ban = build_banyan(pts, inst.eps)
    D = pairwise_dist(pts)
    a, b = sorted(np.unravel_index(int(np.argmax(D)), D.shape))
    Q = ban.vertices[ban.groups.get((int(a), int(b)), [])]
    graph = PortalGraph(tree, inst.r, DEFAULT_CG if c_g is None else c_g, extra=Q)
    G, act, n_edges = graph.adjacency(inst.r)
    t = dreyfus_wagner(G, range(n))
    t.vertices = graph.W
    stats = {"waypoints": int(act.sum()), "edges": n_edges, "banyan_points": len(ban.Q)}
    return SteinerResult(t, n, len(Q), stats)
