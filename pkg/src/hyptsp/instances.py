"""Random instances and their on-disk JSON form."""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .hgeom import DomainError, HPoint, from_klein

MODEL = "half-space"
MAX_REJECTIONS = 10_000_000


def sample_ball(n: int, radius: float, d: int = 2, rng: Optional[np.random.Generator] = None) -> list:
    """Uniform points in the hyperbolic ball of the given radius about (0,...,0,1).

    Candidates are uniform in the Klein ball of Euclidean radius tanh(radius);
    the hyperbolic volume density there is (1 - |q|^2)^{-(d+1)/2}, so a
    candidate is kept with probability density / (its maximum on the ball).
    """
    if n < 1 or radius <= 0 or d < 2:
        raise DomainError("need n >= 1, radius > 0, d >= 2")
    rng = rng or np.random.default_rng()
    rk = math.tanh(radius)
    top = (1.0 - rk * rk) ** (-(d + 1) / 2)
    out: list = []
    tries = 0
    while len(out) < n:
        batch = max(64, 4 * (n - len(out)))
        g = rng.standard_normal((batch, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        q = g * rk * rng.random(batch)[:, None] ** (1.0 / d)
        dens = (1.0 - np.einsum("ij,ij->i", q, q)) ** (-(d + 1) / 2)
        keep = q[rng.random(batch) * top < dens]
        out.extend(from_klein(k) for k in keep[: n - len(out)])
        tries += batch
        if tries > MAX_REJECTIONS:
            raise DomainError("ball sampler exceeded its rejection budget")
    return out


def sample_horobox(n: int, width: float, z_lo: float, z_hi: float, d: int = 2, rng=None) -> list:
    """Uniform points in [0, width]^{d-1} x [z_lo, z_hi] under the hyperbolic volume z^{-d}."""
    if n < 1 or width <= 0 or not 0 < z_lo < z_hi or d < 2:
        raise DomainError("invalid horobox parameters")
    rng = rng or np.random.default_rng()
    x = rng.random((n, d - 1)) * width
    a, b = z_lo ** (1 - d), z_hi ** (1 - d)
    z = (a - rng.random(n) * (a - b)) ** (1.0 / (1 - d))
    return [HPoint(tuple(xi), float(zi)) for xi, zi in zip(x, z)]


def generate(kind: str, n: int, scale: float, seed: int, d: int = 2) -> list:
    """Deterministic instance: 'ball' of radius scale, or 'horobox' [0, scale]^{d-1} x [1, e^scale]."""
    if n < 2:
        raise DomainError("an instance needs at least two points")
    rng = np.random.default_rng(seed)
    if kind == "ball":
        return sample_ball(n, scale, d, rng)
    if kind == "horobox":
        return sample_horobox(n, scale, 1.0, math.exp(scale), d, rng)
    raise DomainError(f"unknown instance kind {kind!r}")


def to_json(points: Sequence[HPoint]) -> dict:
    return {"dimension": points[0].d, "model": MODEL, "points": [list(p.coords()) for p in points]}


def from_json(doc: dict) -> list:
    if doc.get("model") != MODEL:
        raise DomainError(f"unsupported model {doc.get('model')!r}")
    d = int(doc["dimension"])
    pts = []
    for row in doc["points"]:
        if len(row) != d:
            raise DomainError(f"point {row} does not have {d} coordinates")
        pts.append(HPoint.from_coords(row))
    if len(pts) < 2:
        raise DomainError("an instance needs at least two points")
    return pts


def save(points: Sequence[HPoint], path) -> None:
    Path(path).write_text(json.dumps(to_json(points), indent=1) + "\n")


def load(path) -> list:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DomainError(f"cannot read instance {path}: {exc}") from exc
    return from_json(doc)
