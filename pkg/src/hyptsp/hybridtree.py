"""Binary tiling, hybrid hyperbolic quadtree, shifting and compression.

Cells are addressed by integer lattice indices in the *lattice frame*, the
coordinates of the unshifted tiling.  A shift ``a = (a_x, a_z)`` moves the
tree by ``(x, z) -> (x - a_x, z / a_z)``; we realise this by mapping the
points the other way, ``u = (x + a_x, z * a_z)``, and building the standard
tree on ``u``.  Everything metric is measured in the *real frame*.

Cell geometry (``w = 1/sqrt(d-1)``):

* level ``l >= 0``, top tile row ``k``: x in ``2^k w [ix, ix+1]``,
  z in ``[2^(k-l), 2^(k+1)]``;
* level ``l < 0`` inside tile row ``k`` with ``s = 2^l``:
  x in ``2^k w s [ix, ix+1]``, z in ``2^(k + s [iz, iz+1])``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .hgeom import DomainError, HPoint, as_array, pairwise_dist

TIE_TOL = 1e-12
# Bi-Lipschitz constant of the level-0 chart over all shifts: the stretch tends to
# a_z -> 2 at the cell floor (tools/calibrate_chart_portals.py saw 1.993), +10%.
CHART_LIPSCHITZ = 2.2


def width_unit(d: int) -> float:
    return 1.0 / math.sqrt(d - 1)


def _idx(v: float) -> int:
    # points on a boundary go to the lower-index neighbour
    return math.ceil(v - TIE_TOL) - 1


@dataclass(frozen=True, order=True)
class Cell:
    level: int
    k: int
    ix: tuple
    iz: int = 0

    @property
    def d(self) -> int:
        return len(self.ix) + 1

    def lattice_box(self):
        """(lo, hi) corners in the lattice frame, each of length d."""
        w = width_unit(self.d)
        ix = np.array(self.ix, dtype=float)
        if self.level >= 0:
            g = 2.0**self.k * w
            zlo, zhi = 2.0 ** (self.k - self.level), 2.0 ** (self.k + 1)
        else:
            s = 2.0**self.level
            g = 2.0**self.k * w * s
            zlo, zhi = 2.0 ** (self.k + s * self.iz), 2.0 ** (self.k + s * (self.iz + 1))
        lo = np.append(g * ix, zlo)
        hi = np.append(g * (ix + 1), zhi)
        return lo, hi

    @property
    def x_min(self) -> tuple:
        return tuple(self.lattice_box()[0][:-1])

    @property
    def z_min(self) -> float:
        return float(self.lattice_box()[0][-1])

    @property
    def width(self) -> float:
        lo, hi = self.lattice_box()
        return float((hi[0] - lo[0]) / lo[-1])

    @property
    def height(self) -> float:
        lo, hi = self.lattice_box()
        return math.log2(hi[-1] / lo[-1])

    def children(self) -> list:
        dh = self.d - 1
        if self.level > 0:
            out = [Cell(0, self.k, self.ix)]
            for e in itertools.product((0, 1), repeat=dh):
                out.append(Cell(self.level - 1, self.k - 1, tuple(2 * i + b for i, b in zip(self.ix, e))))
            return out
        iz0 = 0 if self.level == 0 else 2 * self.iz
        return [
            Cell(self.level - 1, self.k, tuple(2 * i + b for i, b in zip(self.ix, e)), iz0 + ez)
            for e in itertools.product((0, 1), repeat=dh)
            for ez in (0, 1)
        ]

    def child_containing(self, u) -> "Cell":
        """Child holding lattice point u (ties go to the lower index)."""
        w = width_unit(self.d)
        x, z = u[:-1], u[-1]
        if self.level > 0:
            if _idx(math.log2(z)) >= self.k:
                return Cell(0, self.k, self.ix)
            g = 2.0 ** (self.k - 1) * w
            ix = tuple(min(max(_idx(xi / g), 2 * i), 2 * i + 1) for xi, i in zip(x, self.ix))
            return Cell(self.level - 1, self.k - 1, ix)
        s = 2.0 ** (self.level - 1)
        g = 2.0**self.k * w * s
        ix = tuple(min(max(_idx(xi / g), 2 * i), 2 * i + 1) for xi, i in zip(x, self.ix))
        iz0 = 0 if self.level == 0 else 2 * self.iz
        iz = min(max(_idx((math.log2(z) - self.k) / s), iz0), iz0 + 1)
        return Cell(self.level - 1, self.k, ix, iz)

    def contains_lattice(self, u, tol: float = 1e-12) -> bool:
        lo, hi = self.lattice_box()
        u = np.asarray(u)
        scale = np.maximum(1.0, np.abs(hi))
        return bool(np.all(u >= lo - tol * scale) and np.all(u <= hi + tol * scale))


def box_corners(lo, hi) -> np.ndarray:
    return np.array(list(itertools.product(*zip(lo, hi))), dtype=float)


def box_diameter(lo, hi) -> float:
    """Hyperbolic diameter of an axis-aligned horobox (attained at corners)."""
    c = box_corners(lo, hi)
    return float(pairwise_dist(c).max())


# ---------------------------------------------------------------- instances


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple

    def diameter(self) -> float:
        return box_diameter(np.array(self.lo), np.array(self.hi))


@dataclass
class Normalized:
    points: list
    box: Box
    s: float
    scale: float  # original = (x / scale + offset, z / scale)
    offset: tuple

    def to_original(self, p: HPoint) -> HPoint:
        return HPoint(tuple(np.array(p.x) / self.scale + np.array(self.offset)), p.z / self.scale)


def _opposite_facet_distances(X: np.ndarray, Z: float) -> list:
    dists = [math.log(Z)]
    dists += [2.0 * math.asinh(xi / (2.0 * Z)) for xi in X]
    return dists


def normalize_bounding_box(P: Sequence[HPoint]) -> Normalized:
    """Apply T_{sigma,tau} so the bounding box starts at x = 0, z = 1."""
    if len(P) < 2:
        raise DomainError("need at least two points")
    A = as_array(P)
    xmin, zmin = A[:, :-1].min(axis=0), A[:, -1].min()
    scale = 1.0 / zmin
    U = A.copy()
    U[:, :-1] = (A[:, :-1] - xmin) * scale
    U[:, -1] = A[:, -1] * scale
    X, Z = U[:, :-1].max(axis=0), U[:, -1].max()
    s = max(_opposite_facet_distances(X, Z))
    if s <= 0:
        raise DomainError("all points coincide")
    # degenerate extents get a sliver so the box is full-dimensional
    X = np.where(X > 0, X, 1e-6 * s)
    if Z <= 1.0:
        Z = math.exp(1e-6 * s)
    box = Box(tuple([0.0] * len(X)) + (1.0,), tuple(X) + (Z,))
    pts = [HPoint.from_coords(row) for row in U]
    return Normalized(pts, box, s, scale, tuple(xmin))


def level_cell_diameter(level: int, d: int) -> float:
    """Largest diameter of an unshifted cell of the given level."""
    if level >= 0:
        cell = Cell(level, level, (0,) * (d - 1))
    else:
        cell = Cell(level, 0, (0,) * (d - 1), 0)
    lo, hi = cell.lattice_box()
    return box_diameter(lo, hi)


def compute_levels(box: Box, eps: float, n: int):
    """Return (l_min, l_max) for a normalised bounding box."""
    d = len(box.lo)
    target = eps / ((d + 1) * n) * box.diameter()
    lmin = 0
    while 2.0 * level_cell_diameter(lmin, d) >= target:
        lmin -= 1
        if lmin < -60:
            raise DomainError("l_min underflow; instance too degenerate")
    X, Z = np.array(box.hi[:-1]), box.hi[-1]
    w = width_unit(d)
    lev = 0
    while not (2.0 ** (lev + 1) >= Z * (1 - 1e-15) and np.all(2.0**lev * w >= X * (1 - 1e-15))):
        lev += 1
    return lmin, lev + 1


def root_cell(lmax: int, d: int) -> Cell:
    return Cell(lmax, lmax, (0,) * (d - 1))


def locate_global(u, level: int) -> Cell:
    """Unshifted level-``level`` (<= 0) cell containing lattice point u, clamped to rows/columns >= 0."""
    d = len(u)
    w = width_unit(d)
    k = max(_idx(math.log2(u[-1])), 0)
    s = 2.0**level
    g = 2.0**k * w * s
    ix = tuple(max(_idx(xi / g), 0) for xi in u[:-1])
    iz = min(max(_idx((math.log2(u[-1]) - k) / s), 0), 2 ** (-level) - 1)
    return Cell(level, k, ix, iz if level < 0 else 0)


def cell_center(lo, hi) -> np.ndarray:
    """Centre in the chart: horizontal midpoint, geometric mean height."""
    c = (np.asarray(lo) + np.asarray(hi)) / 2.0
    c[-1] = math.sqrt(lo[-1] * hi[-1])
    return c


def perturb(P: Sequence[HPoint], lmin: int, delta: float) -> list:
    """Snap each point to its level-l_min cell centre plus mu*(1,...,1), mu = 1e-9*delta."""
    mu = 1e-9 * delta
    out = []
    for p in P:
        cell = locate_global(np.array(p.coords()), lmin)
        lo, hi = cell.lattice_box()
        out.append(HPoint.from_coords(cell_center(lo, hi) + mu))
    return out


# ---------------------------------------------------------------- shifting


@dataclass(frozen=True)
class Shift:
    a_x: tuple
    a_z: float

    def __post_init__(self):
        if not 1.0 <= self.a_z < 2.0:
            raise DomainError("a_z must lie in [1, 2)")

    @classmethod
    def identity(cls, d: int) -> "Shift":
        return cls((0.0,) * (d - 1), 1.0)


class ShiftCapExceeded(RuntimeError):
    def __init__(self, count: int, cap: int):
        super().__init__(f"{count} shifts exceed the enumeration cap {cap}")
        self.count = count
        self.cap = cap


@dataclass(frozen=True)
class ShiftSpace:
    """The discrete shift set {x_min(C)} x ({z_min(C)} cap [1,2)) over C_min."""

    d: int
    lmin: int
    lmax: int

    @property
    def per_axis(self) -> int:
        return 2 ** (self.lmax - 1 - self.lmin)

    @property
    def z_count(self) -> int:
        return 2 ** (-self.lmin)

    def count(self) -> int:
        return self.per_axis ** (self.d - 1) * self.z_count

    def make(self, ix: Sequence[int], iz: int) -> Shift:
        g = width_unit(self.d) * 2.0**self.lmin
        return Shift(tuple(g * i for i in ix), 2.0 ** (iz * 2.0**self.lmin))

    def sample(self, rng: np.random.Generator) -> Shift:
        ix = rng.integers(0, self.per_axis, size=self.d - 1)
        return self.make(tuple(int(i) for i in ix), int(rng.integers(0, self.z_count)))

    def enumerate(self, cap: Optional[int] = None) -> list:
        total = self.count()
        if cap is not None and total > cap:
            raise ShiftCapExceeded(total, cap)
        return [
            self.make(ix, iz)
            for ix in itertools.product(range(self.per_axis), repeat=self.d - 1)
            for iz in range(self.z_count)
        ]


def apply_shift(p: HPoint, a: Shift) -> HPoint:
    return HPoint(tuple(np.array(p.x) - np.array(a.a_x)), p.z / a.a_z)


def unshift(p: HPoint, a: Shift) -> HPoint:
    return HPoint(tuple(np.array(p.x) + np.array(a.a_x)), p.z * a.a_z)


# ---------------------------------------------------------------- the tree


@dataclass
class Node:
    id: int
    cell: Cell
    parent: Optional[int]
    children: list = field(default_factory=list)
    kind: str = "leaf"  # 'branch' | 'compressed' | 'leaf'
    points: list = field(default_factory=list)  # all input indices in the subtree

    @property
    def compressed(self) -> bool:
        return self.kind == "compressed"

    @property
    def level(self) -> int:
        return self.cell.level


@dataclass
class ShiftedTree:
    d: int
    shift: Shift
    lmin: int
    lmax: int
    delta: float
    nodes: list
    points: np.ndarray  # real frame, (n, d)
    lattice: np.ndarray  # lattice frame, (n, d)
    leaf_of: list

    @property
    def root(self) -> Node:
        return self.nodes[0]

    def real_box(self, cell: Cell):
        lo, hi = cell.lattice_box()
        a_x, a_z = np.array(self.shift.a_x), self.shift.a_z
        lo = np.append(lo[:-1] - a_x, lo[-1] / a_z)
        hi = np.append(hi[:-1] - a_x, hi[-1] / a_z)
        return lo, hi

    def to_lattice(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return np.append(p[:-1] + np.array(self.shift.a_x), p[-1] * self.shift.a_z)

    def to_real(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return np.append(u[:-1] - np.array(self.shift.a_x), u[-1] / self.shift.a_z)

    def leaves(self) -> list:
        return [nd for nd in self.nodes if nd.kind == "leaf"]

    def regions(self) -> list:
        """Nodes that own a region: leaves and compressed annuli."""
        return [nd for nd in self.nodes if nd.kind != "branch"]

    def __len__(self) -> int:
        return len(self.nodes)


def _build(tree_nodes, cell, parent, idx, U, lmin, leaf_of):
    node = Node(len(tree_nodes), cell, parent, points=list(idx))
    tree_nodes.append(node)
    if not idx or cell.level == lmin:
        node.kind = "leaf"
        for i in idx:
            leaf_of[i] = node.id
        return node
    # follow the chain of single non-empty children
    cur = cell
    parts = None
    while True:
        parts = {}
        for i in idx:
            parts.setdefault(cur.child_containing(U[i]), []).append(i)
        if len(parts) > 1 or cur.level == lmin:
            break
        (only,) = parts
        if only.level == lmin:
            cur = only
            break
        cur = only
    if cur != cell:
        node.kind = "compressed"
        child = _build(tree_nodes, cur, node.id, idx, U, lmin, leaf_of)
        node.children = [child.id]
        return node
    node.kind = "branch"
    for ch in cell.children():
        sub = _build(tree_nodes, ch, node.id, parts.get(ch, []), U, lmin, leaf_of)
        node.children.append(sub.id)
    return node


def build_compressed_tree(points: Sequence[HPoint], shift: Shift, lmin: int, lmax: int, delta: float) -> ShiftedTree:
    """Compressed hybrid tree of the (perturbed, normalised) points under a shift."""
    A = as_array(points)
    d = A.shape[1]
    U = A.copy()
    U[:, :-1] += np.array(shift.a_x)
    U[:, -1] *= shift.a_z
    root = root_cell(lmax, d)
    for u in U:
        if not root.contains_lattice(u):
            raise DomainError(f"point {u} outside the root cell")
    nodes: list = []
    leaf_of = [-1] * len(U)
    _build(nodes, root, None, list(range(len(U))), U, lmin, leaf_of)
    return ShiftedTree(d, shift, lmin, lmax, delta, nodes, A, U, leaf_of)


def locate(tree: ShiftedTree, p) -> Node:
    """Region node (leaf or compressed annulus) containing a real-frame point."""
    u = tree.to_lattice(np.asarray(p.coords() if isinstance(p, HPoint) else p, dtype=float))
    node = tree.root
    if not node.cell.contains_lattice(u):
        raise DomainError("point outside the root cell")
    while node.kind != "leaf":
        if node.kind == "compressed":
            child = tree.nodes[node.children[0]]
            if not child.cell.contains_lattice(u):
                return node
            node = child
            continue
        target = node.cell.child_containing(u)
        node = next(tree.nodes[c] for c in node.children if tree.nodes[c].cell == target)
    return node


# ---------------------------------------------------------------- the chart


def phi(tree: ShiftedTree, cell: Cell, p) -> np.ndarray:
    """Chart of a level-0 cell onto the unit cube (real-frame input)."""
    if cell.level != 0:
        raise DomainError("phi is defined on level-0 cells")
    lo, hi = tree.real_box(cell)
    p = np.asarray(p.coords() if isinstance(p, HPoint) else p, dtype=float)
    tol = 1e-12 * max(1.0, float(np.abs(hi).max()))
    if np.any(p < lo - tol) or np.any(p > hi + tol):
        raise DomainError("point outside the cell")
    d = len(p)
    a_z = tree.shift.a_z
    x = (p[:-1] - lo[:-1]) * math.sqrt(d - 1) / (a_z * lo[-1])
    return np.append(x, math.log2(p[-1] / lo[-1]))


def phi_inv(tree: ShiftedTree, cell: Cell, q) -> np.ndarray:
    lo, _ = tree.real_box(cell)
    q = np.asarray(q, dtype=float)
    d = len(q)
    x = lo[:-1] + q[:-1] * tree.shift.a_z * lo[-1] / math.sqrt(d - 1)
    return np.append(x, lo[-1] * 2.0 ** q[-1])


# ---------------------------------------------------------------- pipeline


@dataclass
class Prepared:
    """A normalised, perturbed instance with its level range."""

    d: int
    eps: float
    normalized: Normalized
    lmin: int
    lmax: int
    delta: float
    perturbed: list

    @property
    def shifts(self) -> ShiftSpace:
        return ShiftSpace(self.d, self.lmin, self.lmax)

    def tree(self, shift: Shift) -> ShiftedTree:
        return build_compressed_tree(self.perturbed, shift, self.lmin, self.lmax, self.delta)


def prepare(P: Sequence[HPoint], eps: float) -> Prepared:
    if not 0 < eps:
        raise DomainError("epsilon must be positive")
    norm = normalize_bounding_box(P)
    d = len(norm.box.lo)
    lmin, lmax = compute_levels(norm.box, eps, len(P))
    delta = level_cell_diameter(lmin, d)
    pert = perturb(norm.points, lmin, delta)
    return Prepared(d, eps, norm, lmin, lmax, delta, pert)
