"""Primitives for the Poincare upper half-space model of H^d (d = 2 or 3).

Points are ``HPoint(x, z)`` with ``x`` a tuple of d-1 horizontal coordinates
and ``z > 0`` the height.  Vectorised helpers work on ``(n, d)`` arrays whose
last column is the height.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

INCIDENCE_TOL = 1e-12
METRIC_TOL = 1e-9


class DomainError(ValueError):
    pass


class DegenerateGeodesicError(DomainError):
    pass


class AmbiguousCrossingError(DomainError):
    """An endpoint lies on the hyperplane; the caller has to perturb."""


@dataclass(frozen=True)
class HPoint:
    x: tuple
    z: float

    def __post_init__(self):
        x = tuple(float(v) for v in np.atleast_1d(self.x))
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", float(self.z))
        if not all(math.isfinite(v) for v in x) or not math.isfinite(self.z):
            raise DomainError(f"non-finite coordinates: {x}, {self.z}")
        if self.z <= 0:
            raise DomainError(f"height must be positive, got {self.z}")

    @property
    def d(self) -> int:
        return len(self.x) + 1

    @classmethod
    def from_coords(cls, coords: Sequence[float]) -> "HPoint":
        coords = list(coords)
        return cls(tuple(coords[:-1]), coords[-1])

    def coords(self) -> tuple:
        return self.x + (self.z,)

    def array(self) -> np.ndarray:
        return np.array(self.coords())


@dataclass(frozen=True)
class VerticalHyperplane:
    axis: int  # 0-based horizontal axis
    offset: float

    def check(self, d: int) -> None:
        if not 0 <= self.axis < d - 1:
            raise DomainError(f"axis {self.axis} out of range for d={d}")


@dataclass(frozen=True)
class Horosphere:
    height: float

    def __post_init__(self):
        if not self.height > 0:
            raise DomainError("horosphere height must be positive")


@dataclass(frozen=True)
class Geodesic:
    """Geodesic segment from p to q.

    Arcs are stored in the vertical 2-plane through p and q: ``center`` is the
    foot of the circle on z = 0 (a point of R^{d-1}) and ``radius`` its
    Euclidean radius.  Vertical segments have ``center = x(p)`` and radius 0.
    """

    p: HPoint
    q: HPoint
    vertical: bool
    center: tuple
    radius: float

    def _frame(self):
        xp, xq = np.array(self.p.x), np.array(self.q.x)
        span = float(np.linalg.norm(xq - xp))
        u = (xq - xp) / span
        t0 = float(np.dot(np.array(self.center) - xp, u))
        return xp, u, span, t0

    def point_at_t(self, t: float) -> HPoint:
        """Point above horizontal parameter t (distance from x(p) along the foot line)."""
        xp, u, _, t0 = self._frame()
        z2 = self.radius**2 - (t - t0) ** 2
        return HPoint(tuple(xp + t * u), math.sqrt(max(z2, 0.0)))

    def angle_of(self, pt: HPoint) -> float:
        if self.vertical:
            return math.log(pt.z)
        xp, u, _, t0 = self._frame()
        t = float(np.dot(np.array(pt.x) - xp, u))
        return math.atan2(pt.z, t - t0)

    def contains(self, pt: HPoint, tol: float = METRIC_TOL) -> bool:
        if self.vertical:
            if np.linalg.norm(np.array(pt.x) - np.array(self.p.x)) > tol:
                return False
            lo, hi = sorted((self.p.z, self.q.z))
            return lo - tol <= pt.z <= hi + tol
        xp, u, span, t0 = self._frame()
        rel = np.array(pt.x) - xp
        t = float(np.dot(rel, u))
        if np.linalg.norm(rel - t * u) > tol or not -tol <= t <= span + tol:
            return False
        return abs(math.hypot(t - t0, pt.z) - self.radius) <= tol * max(1.0, self.radius)


def _check(p: HPoint, q: HPoint) -> None:
    if len(p.x) != len(q.x):
        raise DomainError("points of different dimension")


def hyp_distance(p: HPoint, q: HPoint) -> float:
    _check(p, q)
    sq = sum((a - b) ** 2 for a, b in zip(p.x, q.x)) + (p.z - q.z) ** 2
    return 2.0 * math.asinh(math.sqrt(sq / (4.0 * p.z * q.z)))


def geodesic(p: HPoint, q: HPoint) -> Geodesic:
    _check(p, q)
    xp, xq = np.array(p.x), np.array(q.x)
    span = float(np.linalg.norm(xq - xp))
    if span < INCIDENCE_TOL:
        if abs(p.z - q.z) < INCIDENCE_TOL:
            raise DegenerateGeodesicError("geodesic between identical points")
        return Geodesic(p, q, True, tuple(xp), 0.0)
    # foot t0 on the line through x(p), x(q) with |t0|^2 + z_p^2 = |span - t0|^2 + z_q^2
    t0 = (span**2 + q.z**2 - p.z**2) / (2.0 * span)
    u = (xq - xp) / span
    return Geodesic(p, q, False, tuple(xp + t0 * u), math.hypot(t0, p.z))


def crossing(seg: Geodesic, H: VerticalHyperplane) -> Optional[HPoint]:
    H.check(seg.p.d)
    sp = seg.p.x[H.axis] - H.offset
    sq = seg.q.x[H.axis] - H.offset
    if abs(sp) < INCIDENCE_TOL or abs(sq) < INCIDENCE_TOL:
        raise AmbiguousCrossingError("segment endpoint lies on the hyperplane")
    if sp * sq > 0:
        return None
    xp, u, _, _ = seg._frame()
    t = (H.offset - xp[H.axis]) / u[H.axis]
    pt = seg.point_at_t(t)
    x = list(pt.x)
    x[H.axis] = H.offset
    return HPoint(tuple(x), pt.z)


def horosphere_intersections(seg: Geodesic, S: Horosphere) -> list:
    c = S.height
    if seg.vertical:
        lo, hi = sorted((seg.p.z, seg.q.z))
        if lo <= c <= hi:
            return [HPoint(seg.p.x, c)]
        return []
    _, _, span, t0 = seg._frame()
    if c > seg.radius:
        return []
    h = math.sqrt(seg.radius**2 - c**2)
    out = []
    for t in sorted({t0 - h, t0 + h}):
        if -INCIDENCE_TOL <= t <= span + INCIDENCE_TOL:
            pt = seg.point_at_t(min(max(t, 0.0), span))
            out.append(HPoint(pt.x, c))
    return out


def dist_to_vertical(p: HPoint, H: VerticalHyperplane) -> float:
    H.check(p.d)
    return math.asinh(abs(p.x[H.axis] - H.offset) / p.z)


def _to_hyperboloid(p: HPoint) -> np.ndarray:
    x = np.array(p.x)
    s = float(np.dot(x, x)) + p.z * p.z
    return np.concatenate(([(s + 1) / (2 * p.z)], x / p.z, [(s - 1) / (2 * p.z)]))


def _from_hyperboloid(X: np.ndarray) -> HPoint:
    t, u, v = X[0], X[1:-1], X[-1]
    z = 1.0 / (t - v)
    return HPoint(tuple(u * z), z)


def to_klein(p: HPoint) -> np.ndarray:
    """Klein-ball coordinates; (0,...,0,1) goes to the centre, the z-axis to the last axis."""
    X = _to_hyperboloid(p)
    return X[1:] / X[0]


def from_klein(q) -> HPoint:
    q = np.asarray(q, dtype=float)
    n2 = float(np.dot(q, q))
    if not n2 < 1.0:
        raise DomainError("Klein point must lie in the open unit ball")
    t = 1.0 / math.sqrt(1.0 - n2)
    return _from_hyperboloid(np.concatenate(([t], q * t)))


def klein_distance(p, q) -> float:
    p, q = np.asarray(p, float), np.asarray(q, float)
    pp, qq, pq = float(p @ p), float(q @ q), float(p @ q)
    S = math.sqrt((1 - pp) * (1 - qq))
    A = 1 - pq
    diff = q - p
    dd, pd = float(diff @ diff), float(p @ diff)
    # |p|^2|q|^2 - (p.q)^2 written through q - p to avoid cancellation
    num = dd - max(pp * dd - pd * pd, 0.0)
    sh2 = max(num, 0.0) / ((A + S) * 2 * S)
    return 2.0 * math.asinh(math.sqrt(sh2))


def geodesic_midpoint(p: HPoint, q: HPoint) -> HPoint:
    if p == q:
        return p
    X = _to_hyperboloid(p) + _to_hyperboloid(q)
    norm = math.sqrt(X[0] ** 2 - float(X[1:] @ X[1:]))
    return _from_hyperboloid(X / norm)


def tour_length(points: Sequence[HPoint], closed: bool = True) -> float:
    if len(points) < 2:
        raise DomainError("need at least two points")
    total = sum(hyp_distance(a, b) for a, b in zip(points, points[1:]))
    if closed:
        total += hyp_distance(points[-1], points[0])
    return total


# ---------------------------------------------------------------- vectorised


def as_array(points) -> np.ndarray:
    if isinstance(points, np.ndarray):
        return np.atleast_2d(points).astype(float)
    return np.array([p.coords() for p in points], dtype=float)


def pairwise_dist(A: np.ndarray, B: Optional[np.ndarray] = None) -> np.ndarray:
    """Hyperbolic distance matrix between the rows of A and B."""
    B = A if B is None else B
    diff = A[:, None, :] - B[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    return 2.0 * np.arcsinh(np.sqrt(sq / (4.0 * A[:, -1][:, None] * B[:, -1][None, :])))


def dist_rows(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Row-wise distances between matching rows of A and B."""
    diff = A - B
    sq = np.einsum("ij,ij->i", diff, diff)
    return 2.0 * np.arcsinh(np.sqrt(sq / (4.0 * A[:, -1] * B[:, -1])))


def plane_crossings(P: np.ndarray, Q: np.ndarray, axis: int, c: float, tol: float = INCIDENCE_TOL):
    """Crossings of the geodesics P[i]Q[i] with the plane ``coord[axis] = c``.

    ``axis = d-1`` is the horosphere z = c, anything smaller a vertical
    hyperplane.  Returns ``(mask, X)``: mask marks pieces whose endpoints lie
    strictly on opposite sides; X holds the crossing points (rows for the
    masked pieces, NaN elsewhere).
    """
    P, Q = np.atleast_2d(P), np.atleast_2d(Q)
    sp, sq = P[:, axis] - c, Q[:, axis] - c
    mask = (sp * sq < 0) & (np.abs(sp) > tol) & (np.abs(sq) > tol)
    X = np.full(P.shape, np.nan)
    if not mask.any():
        return mask, X
    p, q = P[mask], Q[mask]
    dx = q[:, :-1] - p[:, :-1]
    span = np.linalg.norm(dx, axis=1)
    vert = span <= tol
    safe = np.where(vert, 1.0, span)
    t0 = (span**2 + q[:, -1] ** 2 - p[:, -1] ** 2) / (2.0 * safe)
    rho2 = t0**2 + p[:, -1] ** 2
    out = np.empty_like(p)
    if axis < P.shape[1] - 1:
        lam = sp[mask] / (sp[mask] - sq[mask])
        t = lam * span
        out[:, :-1] = p[:, :-1] + lam[:, None] * dx
        out[:, -1] = np.sqrt(np.maximum(rho2 - (t - t0) ** 2, 0.0))
    else:
        h = np.sqrt(np.maximum(rho2 - c * c, 0.0))
        t = t0 - h
        bad = (t < -tol) | (t > span + tol)
        t = np.where(bad, t0 + h, t)
        t = np.clip(t, 0.0, span)
        lam = np.where(vert, 0.0, t / safe)
        out[:, :-1] = p[:, :-1] + lam[:, None] * dx
        out[:, -1] = c
    X[mask] = out
    return mask, X


def geodesic_peak(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Highest z reached on each geodesic P[i]Q[i]."""
    span = np.linalg.norm(Q[:, :-1] - P[:, :-1], axis=1)
    safe = np.where(span > 0, span, 1.0)
    t0 = (span**2 + Q[:, -1] ** 2 - P[:, -1] ** 2) / (2.0 * safe)
    inside = (span > 0) & (t0 > 0) & (t0 < span)
    peak = np.sqrt(t0**2 + P[:, -1] ** 2)
    return np.where(inside, peak, np.maximum(P[:, -1], Q[:, -1]))
