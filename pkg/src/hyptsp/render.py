"""SVG drawing of a d=2 decomposition in the upper half-plane."""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .hgeom import DomainError
from .hybridtree import ShiftedTree

TOUR_COLOR = "#c0392b"
CELL_COLOR = "#7f8c8d"
PORTAL_COLOR = "#2471a3"


class Frame:
    """Uniform-scale map from the half-plane to pixels (z = 0 at the bottom edge)."""

    def __init__(self, x_lo: float, x_hi: float, z_hi: float, width: int):
        self.x_lo = x_lo
        self.scale = width / (x_hi - x_lo)
        self.width = width
        self.height = max(1, int(math.ceil(z_hi * self.scale)))

    def px(self, x: float, z: float):
        return (x - self.x_lo) * self.scale, self.height - z * self.scale


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def arc_path(frame: Frame, p, q) -> str:
    """Path data for the geodesic pq: a circular arc centred on z = 0, or a vertical segment."""
    x1, y1 = frame.px(p[0], p[1])
    x2, y2 = frame.px(q[0], q[1])
    span = q[0] - p[0]
    if abs(span) <= 1e-12 * max(1.0, abs(p[0])):
        return f"M {_fmt(x1)} {_fmt(y1)} L {_fmt(x2)} {_fmt(y2)}"
    centre = p[0] + (span**2 + q[1] ** 2 - p[1] ** 2) / (2.0 * span)
    radius = math.hypot(p[0] - centre, p[1]) * frame.scale
    sweep = 1 if span > 0 else 0
    return f"M {_fmt(x1)} {_fmt(y1)} A {_fmt(radius)} {_fmt(radius)} 0 0 {sweep} {_fmt(x2)} {_fmt(y2)}"


def _frame_for(points: np.ndarray, width: int) -> Frame:
    lo, hi = points.min(axis=0), points.max(axis=0)
    pad = 0.25 * max(hi[0] - lo[0], hi[1], 1e-9)
    return Frame(lo[0] - pad, hi[0] + pad, hi[1] + pad, width)


def render_svg(
    points,
    tree: Optional[ShiftedTree] = None,
    portals: Sequence = (),
    tour: Optional[np.ndarray] = None,
    width: int = 1000,
) -> str:
    """Cells as rectangles, portals as small circles, the tour as geodesic arcs.

    Coordinates are those of ``tree`` (its real frame); ``portals`` is a list of
    ``(m, 2)`` arrays; ``tour`` is a closed walk of coordinates or None.
    """
    P = np.atleast_2d(np.asarray(points, dtype=float))
    if P.shape[1] != 2:
        raise DomainError("rendering needs d = 2")
    frame = _frame_for(P, width)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{frame.width}" height="{frame.height}" '
        f'viewBox="0 0 {frame.width} {frame.height}">',
        '<defs><clipPath id="view"><rect x="0" y="0" '
        f'width="{frame.width}" height="{frame.height}"/></clipPath></defs>',
        '<rect x="0" y="0" width="100%" height="100%" fill="white"/>',
        '<g clip-path="url(#view)">',
    ]
    if tree is not None:
        out.append(f'<g fill="none" stroke="{CELL_COLOR}" stroke-width="0.5">')
        for node in tree.nodes:
            lo, hi = tree.real_box(node.cell)
            x0, y1 = frame.px(lo[0], lo[1])
            x1, y0 = frame.px(hi[0], hi[1])
            out.append(f'<rect x="{_fmt(x0)}" y="{_fmt(y0)}" width="{_fmt(x1 - x0)}" height="{_fmt(y1 - y0)}"/>')
        out.append("</g>")
    if len(portals):
        out.append(f'<g fill="{PORTAL_COLOR}">')
        for pts in portals:
            for x, z in np.atleast_2d(pts):
                cx, cy = frame.px(x, z)
                out.append(f'<circle cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="1"/>')
        out.append("</g>")
    if tour is not None and len(tour) > 1:
        T = np.asarray(tour, dtype=float)
        out.append(f'<g fill="none" stroke="{TOUR_COLOR}" stroke-width="1.5">')
        for a, b in zip(T, np.roll(T, -1, axis=0)):
            if np.allclose(a, b):
                continue
            out.append(f'<path d="{arc_path(frame, a, b)}"/>')
        out.append("</g>")
    out.append('<g fill="black">')
    for x, z in P:
        cx, cy = frame.px(x, z)
        out.append(f'<circle cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="3"/>')
    out += ["</g>", "</g>", "</svg>"]
    return "\n".join(out) + "\n"
