"""Facets between sibling cells and portal placement on them.

All geometry here is in the real frame of a :class:`ShiftedTree`.  Portal
grids are dyadic (interval counts are powers of two), so the portal set for
``r`` is contained in the one for any ``r' >= r``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .hgeom import HPoint, as_array, pairwise_dist
from .hybridtree import Cell, Node, ShiftedTree, box_diameter

TOP, SIDE, NEG = "top", "side", "neg"
EXTENSION = 4.0
DEFAULT_CG = 4.0
MAX_DOUBLINGS = 24
# Per-facet portal count <= PORTAL_CONST[d] * r^(d-1) while log2(span) <= 4.
# Worst case is an extended vertical negative-level facet at r = 2:
# 4*32+1 rows (d=2) or 33*129 nodes (d=3); +25% margin.
PORTAL_CONST = {2: 81.0, 3: 1330.0}


def side_base(d: int) -> float:
    return 2.0 ** (1.0 - 1.0 / d)


@dataclass
class Facet:
    """A flat boundary patch shared by two sibling regions.

    ``axis`` is the coordinate held fixed (``d-1`` for horizontal facets) at
    value ``offset``.  ``lo``/``hi`` bound the patch, including the upward
    extension of vertical negative-level facets; ``z_top`` is the unextended top.
    """

    id: int
    kind: str
    node: int
    siblings: tuple
    level: int
    axis: int
    offset: float
    lo: np.ndarray
    hi: np.ndarray
    z_top: float
    span: int = 1
    slices: list = field(default_factory=list)  # Side only: (depth, lo, hi)

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def horizontal(self) -> bool:
        return self.axis == self.d - 1

    @property
    def extended(self) -> bool:
        return self.hi[-1] > self.z_top


@dataclass
class PortalSet:
    facet: int
    points: np.ndarray  # (m, d)
    depth: np.ndarray  # hop depth of the hosting Side tile, 0 otherwise

    def __len__(self) -> int:
        return len(self.points)

    def hpoints(self) -> list:
        return [HPoint.from_coords(p) for p in self.points]


# ---------------------------------------------------------------- facets


def _face(lo, hi, axis, value):
    lo, hi = lo.copy(), hi.copy()
    lo[axis] = hi[axis] = value
    return lo, hi


def _make(kind, node, sib, level, lo, hi, axis, **kw) -> Facet:
    return Facet(-1, kind, node.id, sib, level, axis, float(lo[axis]), lo, hi, float(hi[-1]), **kw)


def _side_slices(tree: ShiftedTree, lo, hi, axis, top_row: int, depths: int):
    """Tile tree of a vertical positive-level facet: depth h is tiling row top_row - h."""
    d = tree.d
    a_z = tree.shift.a_z
    other = [i for i in range(d - 1) if i != axis]
    out = []
    for h in range(depths):
        z0, z1 = 2.0 ** (top_row - h) / a_z, 2.0 ** (top_row - h + 1) / a_z
        pieces = 2**h
        ranges = []
        for i in other:
            edges = np.linspace(lo[i], hi[i], pieces + 1)
            ranges.append(list(zip(edges[:-1], edges[1:])))
        for combo in itertools.product(*ranges):
            slo, shi = lo.copy(), hi.copy()
            for i, (a, b) in zip(other, combo):
                slo[i], shi[i] = a, b
            slo[-1], shi[-1] = z0, z1
            out.append((h, slo, shi))
    return out


def _branch_facets(tree: ShiftedTree, node: Node) -> list:
    d = tree.d
    kids = [tree.nodes[c] for c in node.children]
    boxes = {ch.id: tree.real_box(ch.cell) for ch in kids}
    out = []
    if node.level > 0:
        tile, lower = kids[0], kids[1:]
        for low in lower:
            lo, hi = boxes[low.id]
            flo, fhi = _face(lo, hi, d - 1, hi[-1])
            out.append(_make(TOP, node, (tile.id, low.id), node.level, flo, fhi, d - 1))
        for a, b in itertools.combinations(lower, 2):
            diff = [i for i, (p, q) in enumerate(zip(a.cell.ix, b.cell.ix)) if p != q]
            if len(diff) != 1:
                continue
            axis = diff[0]
            lo, hi = boxes[a.id]
            cut = hi[axis] if a.cell.ix[axis] < b.cell.ix[axis] else lo[axis]
            flo, fhi = _face(lo, hi, axis, cut)
            top_row = a.cell.k
            f = _make(SIDE, node, (a.id, b.id), node.level, flo, fhi, axis)
            f.slices = _side_slices(tree, flo, fhi, axis, top_row, a.cell.level + 1)
            out.append(f)
        return out
    # level <= 0: Euclidean-style split into 2^d children
    span = max(1, node.level - 1 - tree.lmin)
    for a, b in itertools.combinations(kids, 2):
        ca, cb = a.cell, b.cell
        diff = [i for i, (p, q) in enumerate(zip(ca.ix, cb.ix)) if p != q]
        if ca.iz != cb.iz:
            diff.append(d - 1)
        if len(diff) != 1:
            continue
        axis = diff[0]
        lo, hi = boxes[a.id]
        first = (ca.ix[axis] < cb.ix[axis]) if axis < d - 1 else ca.iz < cb.iz
        cut = hi[axis] if first else lo[axis]
        flo, fhi = _face(lo, hi, axis, cut)
        f = _make(NEG, node, (a.id, b.id), node.level, flo, fhi, axis, span=span)
        if axis < d - 1:
            f.hi[-1] = f.lo[-1] * (1.0 + EXTENSION * (f.z_top / f.lo[-1] - 1.0))
        out.append(f)
    return out


def _compressed_facets(tree: ShiftedTree, node: Node) -> list:
    d = tree.d
    child = tree.nodes[node.children[0]]
    olo, ohi = tree.real_box(node.cell)
    lo, hi = tree.real_box(child.cell)
    lev = child.level
    span = max(1, lev - tree.lmin)
    out = []
    for axis in range(d):
        for value in (lo[axis], hi[axis]):
            scale = max(1.0, abs(value))
            if abs(value - olo[axis]) <= 1e-12 * scale or abs(value - ohi[axis]) <= 1e-12 * scale:
                continue
            flo, fhi = _face(lo, hi, axis, value)
            if lev < 0:
                kind = NEG
            elif axis == d - 1:
                kind = TOP
            else:
                kind = SIDE
            f = _make(kind, node, (node.id, child.id), node.level, flo, fhi, axis, span=span)
            if kind == SIDE:
                f.slices = _side_slices(tree, flo, fhi, axis, child.cell.k, lev + 1)
            out.append(f)
    return out


def facets_of(tree: ShiftedTree, node: Node) -> list:
    """Facets shared by the children of a node (inner boundary for compressed nodes)."""
    if node.kind == "branch":
        return _branch_facets(tree, node)
    if node.kind == "compressed":
        return _compressed_facets(tree, node)
    return []


def all_facets(tree: ShiftedTree) -> list:
    out = []
    for node in tree.nodes:
        for f in facets_of(tree, node):
            f.id = len(out)
            out.append(f)
    return out


# ---------------------------------------------------------------- covers


def _axis_nodes(lo: float, hi: float, n: int, log: bool) -> np.ndarray:
    if log:
        return np.exp(np.linspace(math.log(lo), math.log(hi), n + 1))
    return np.linspace(lo, hi, n + 1)


def _grid(lo, hi, axis, counts, log_z: bool, z_counts: Optional[int] = None) -> np.ndarray:
    d = len(lo)
    axes = []
    for i in range(d):
        if i == axis:
            axes.append(np.array([lo[i]]))
        elif i == d - 1:
            axes.append(_axis_nodes(lo[i], hi[i], z_counts or counts, log_z))
        else:
            axes.append(_axis_nodes(lo[i], hi[i], counts, False))
    return np.array(list(itertools.product(*axes)), dtype=float)


def cover_radius_bound(lo, hi, axis, n: int, log_z: bool) -> float:
    """Diameter of a half-size grid cell at the lowest height (bounds the cover radius)."""
    d = len(lo)
    slo = np.array(lo, dtype=float)
    shi = slo.copy()
    for i in range(d):
        if i == axis:
            continue
        if i == d - 1:
            if log_z:
                shi[i] = lo[i] * (hi[i] / lo[i]) ** (1.0 / (2 * n))
            else:
                shi[i] = lo[i] + (hi[i] - lo[i]) / (2 * n)
        else:
            shi[i] = lo[i] + (hi[i] - lo[i]) / (2 * n)
    return box_diameter(slo, shi)


def dyadic_cover(lo, hi, axis, rho: float, log_z: bool = True) -> np.ndarray:
    """Smallest dyadic grid on the patch whose cover radius is at most rho."""
    n = 1
    for _ in range(MAX_DOUBLINGS):
        if cover_radius_bound(lo, hi, axis, n, log_z) <= rho:
            break
        n *= 2
    return _grid(lo, hi, axis, n, log_z)


def place_top(f: Facet, r: float) -> PortalSet:
    pts = dyadic_cover(f.lo, f.hi, f.axis, 1.0 / r)
    return PortalSet(f.id, pts, np.zeros(len(pts), dtype=int))


def place_side(f: Facet, r: float) -> PortalSet:
    b = side_base(f.d)
    chunks, depths = [], []
    for h, slo, shi in f.slices:
        if b**h > r:
            continue
        pts = dyadic_cover(slo, shi, f.axis, b**h / r)
        chunks.append(pts)
        depths.append(np.full(len(pts), h))
    if not chunks:
        return PortalSet(f.id, np.zeros((0, f.d)), np.zeros(0, dtype=int))
    pts, dep = _dedupe(np.vstack(chunks), np.concatenate(depths))
    return PortalSet(f.id, pts, dep)


def neg_intervals(r: float, span: int, c_g: float = DEFAULT_CG) -> int:
    L = max(1.0, math.log2(max(span, 1)))
    return 2 ** max(0, math.ceil(math.log2(c_g * r * L)))


def place_neg(f: Facet, r: float, c_g: float = DEFAULT_CG) -> PortalSet:
    n = neg_intervals(r, f.span, c_g)
    if f.horizontal:
        pts = _grid(f.lo, f.hi, f.axis, n, False)
    else:
        rows = n
        if f.extended:
            rows = int(round(n * (f.hi[-1] - f.lo[-1]) / (f.z_top - f.lo[-1])))
        pts = _grid(f.lo, f.hi, f.axis, n, False, z_counts=rows)
    return PortalSet(f.id, pts, np.zeros(len(pts), dtype=int))


def place(f: Facet, r: float, c_g: float = DEFAULT_CG) -> PortalSet:
    if f.kind == TOP:
        return place_top(f, r)
    if f.kind == SIDE:
        return place_side(f, r)
    return place_neg(f, r, c_g)


def _dedupe(pts: np.ndarray, extra: np.ndarray):
    key = np.round(pts, 12)
    _, idx = np.unique(key, axis=0, return_index=True)
    idx.sort()
    return pts[idx], extra[idx]


def nearest_portal(pset: PortalSet, p) -> Optional[tuple]:
    """Exact nearest portal under the hyperbolic metric (ties by index), or None if empty."""
    if len(pset) == 0:
        return None
    q = as_array([p]) if isinstance(p, HPoint) else np.atleast_2d(np.asarray(p, float))
    dist = pairwise_dist(q, pset.points)[0]
    i = int(np.argmin(dist))
    return HPoint.from_coords(pset.points[i]), float(dist[i])
