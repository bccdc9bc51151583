"""Planar polygonal domains, the obtuse triangle, angle and cone arithmetic.

Polygons are stored counterclockwise.  Every edge carries its inward unit
normal ``n`` and offset ``c`` so that the half-plane distance of a point ``p``
to the supporting line is ``n . p - c`` (positive on the interior side).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import AngleUndefined, AngleWrapError, GeometryError, HypothesisError

TOL = 1e-12
HALF_PI = 0.5 * math.pi


class _Point2(NamedTuple):
    x1: float
    x2: float


class Point2(_Point2):
    """A finite point of the plane."""

    __slots__ = ()

    def __new__(cls, x1: float, x2: float):
        x1, x2 = float(x1), float(x2)
        if not (math.isfinite(x1) and math.isfinite(x2)):
            raise GeometryError(f"non-finite coordinates ({x1}, {x2})")
        return super().__new__(cls, x1, x2)


def _segments_cross(p, q, r, s) -> bool:
    """Proper or touching intersection of segments pq and rs."""

    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(r, s, p), orient(r, s, q)
    d3, d4 = orient(p, q, r), orient(p, q, s)
    if d1 * d2 < 0 and d3 * d4 < 0:
        return True

    def on_seg(a, b, c, d):
        return abs(d) <= TOL and min(a[0], b[0]) - TOL <= c[0] <= max(a[0], b[0]) + TOL \
            and min(a[1], b[1]) - TOL <= c[1] <= max(a[1], b[1]) + TOL

    return on_seg(r, s, p, d1) or on_seg(r, s, q, d2) or on_seg(p, q, r, d3) or on_seg(p, q, s, d4)


@dataclass(frozen=True, eq=False)
class PolygonalDomain:
    """Simple closed polygon with counterclockwise vertices.

    Derived arrays (``starts``, ``ends``, ``normals``, ``offsets``) are
    read-only; the instance is immutable after construction.
    """

    vertices: np.ndarray
    starts: np.ndarray = field(init=False, repr=False)
    ends: np.ndarray = field(init=False, repr=False)
    normals: np.ndarray = field(init=False, repr=False)
    offsets: np.ndarray = field(init=False, repr=False)
    convex: bool = field(init=False, repr=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise GeometryError("a polygon needs at least 3 planar vertices")
        if not np.all(np.isfinite(v)):
            raise GeometryError("polygon vertices must be finite")
        n = len(v)
        w = np.roll(v, -1, axis=0)
        area2 = float(np.sum(v[:, 0] * w[:, 1] - w[:, 0] * v[:, 1]))
        if area2 <= 0:
            raise GeometryError("vertices must be ordered counterclockwise with positive area")
        edge = w - v
        length = np.hypot(edge[:, 0], edge[:, 1])
        if np.any(length <= TOL):
            raise GeometryError("repeated vertex (zero-length edge)")
        for i in range(n):
            for j in range(i + 1, n):
                if j == i + 1 or (i == 0 and j == n - 1):
                    continue
                if _segments_cross(v[i], w[i], v[j], w[j]):
                    raise GeometryError(f"polygon is not simple: edges {i} and {j} intersect")
        normals = np.column_stack([-edge[:, 1], edge[:, 0]]) / length[:, None]
        offsets = np.einsum("ij,ij->i", normals, v)
        cross = edge[:, 0] * np.roll(edge[:, 1], -1) - edge[:, 1] * np.roll(edge[:, 0], -1)
        for name, arr in (("vertices", v), ("starts", v), ("ends", w),
                          ("normals", normals), ("offsets", offsets)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "convex", bool(np.all(cross >= -TOL)))

    @property
    def n_edges(self) -> int:
        return len(self.starts)

    @property
    def area(self) -> float:
        v, w = self.starts, self.ends
        return 0.5 * float(np.sum(v[:, 0] * w[:, 1] - w[:, 0] * v[:, 1]))

    @property
    def diameter(self) -> float:
        d = self.vertices[:, None, :] - self.vertices[None, :, :]
        return float(np.max(np.hypot(d[..., 0], d[..., 1])))

    def edge_lengths(self) -> np.ndarray:
        e = self.ends - self.starts
        return np.hypot(e[:, 0], e[:, 1])

    def halfplane_distances(self, pts) -> np.ndarray:
        """Signed distances to every supporting line, shape ``(n_points, n_edges)``."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        # elementwise rather than a BLAS product, so each row is bitwise independent of batch size
        return pts[:, :1] * self.normals[:, 0] + pts[:, 1:] * self.normals[:, 1] - self.offsets

    def segment_distances(self, pts) -> np.ndarray:
        """Unsigned distances to every edge segment, shape ``(n_points, n_edges)``."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        e = self.ends - self.starts
        rel = pts[:, None, :] - self.starts[None, :, :]
        t = np.clip(np.einsum("pek,ek->pe", rel, e) / np.einsum("ek,ek->e", e, e), 0.0, 1.0)
        diff = rel - t[..., None] * e[None, :, :]
        return np.hypot(diff[..., 0], diff[..., 1])

    def inside(self, pts) -> np.ndarray:
        """Vectorized closed-domain membership."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        if self.convex:
            return np.all(self.halfplane_distances(pts) >= -TOL, axis=1)
        on_edge = np.min(self.segment_distances(pts), axis=1) <= TOL
        x, y = pts[:, 0:1], pts[:, 1:2]
        y0, y1 = self.starts[None, :, 1], self.ends[None, :, 1]
        x0, x1 = self.starts[None, :, 0], self.ends[None, :, 0]
        straddle = (y0 <= y) != (y1 <= y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xcross = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        crossings = np.sum(straddle & (x < xcross), axis=1)
        return on_edge | (crossings % 2 == 1)


@dataclass(frozen=True)
class ObtuseTriangleSpec:
    """Angles of the two short sides; ``b`` sits at the origin, ``a`` at ``(L, 0)``."""

    a: float
    b: float
    base_length: float = 1.0

    def __post_init__(self):
        if not (-HALF_PI < self.a < 0):
            raise GeometryError(f"a={self.a} must lie in (-pi/2, 0)")
        if not (0 < self.b < HALF_PI):
            raise GeometryError(f"b={self.b} must lie in (0, pi/2)")
        if not self.base_length > 0:
            raise GeometryError("base_length must be positive")
        if self.b - self.a >= HALF_PI:
            raise GeometryError(
                f"b - a = {self.b - self.a:.6g} >= pi/2: apex angle is not obtuse")


def build_obtuse_triangle(spec: ObtuseTriangleSpec) -> PolygonalDomain:
    """Triangle with base ``[0, L]`` on the horizontal axis and apex above it."""
    L = spec.base_length
    ta, tb = math.tan(spec.a), math.tan(spec.b)
    # tan(b) x = tan(a) (x - L)
    x = -L * ta / (tb - ta)
    return PolygonalDomain(np.array([[0.0, 0.0], [L, 0.0], [x, tb * x]]))


def contains(domain: PolygonalDomain, p) -> tuple[bool, int, float]:
    """Closed membership of ``p`` plus the nearest edge and signed distance to it.

    The distance is positive inside and negative outside.
    """
    p = np.asarray(p, dtype=float).reshape(1, 2)
    dist = domain.segment_distances(p)[0]
    k = int(np.argmin(dist))
    ok = bool(domain.inside(p)[0])
    return ok, k, float(dist[k]) if ok else -float(dist[k])


def reflect_across_edge(domain: PolygonalDomain, p, edge: int) -> np.ndarray:
    """Mirror image of ``p`` across the supporting line of ``edge``."""
    p = np.asarray(p, dtype=float)
    s = p @ domain.normals[edge] - domain.offsets[edge]
    return p - 2.0 * np.asarray(s)[..., None] * domain.normals[edge]


def angle_of(v) -> float:
    """Planar argument of ``v`` in ``(-pi, pi]``."""
    v1, v2 = float(v[0]), float(v[1])
    if v1 == 0.0 and v2 == 0.0:
        raise AngleUndefined("angle of the zero vector")
    ang = math.atan2(v2, v1)
    return math.pi if ang == -math.pi else ang


def angles_of(v: np.ndarray) -> np.ndarray:
    """Vectorized :func:`angle_of`; zero rows give NaN."""
    v = np.asarray(v, dtype=float)
    ang = np.arctan2(v[..., 1], v[..., 0])
    ang = np.where(ang == -np.pi, np.pi, ang)
    return np.where((v[..., 0] == 0) & (v[..., 1] == 0), np.nan, ang)


@dataclass(frozen=True)
class ConeInterval:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise GeometryError(f"empty cone [{self.lo}, {self.hi}]")
        if self.hi - self.lo >= 2 * math.pi:
            raise GeometryError("cone width must be below 2*pi")
        if self.lo < -math.pi or self.hi > math.pi:
            raise AngleWrapError(f"cone [{self.lo}, {self.hi}] wraps past +-pi")

    def widened(self, slack: float) -> tuple[float, float]:
        return self.lo - slack, self.hi + slack

    def excursion(self, angles, slack: float = 0.0) -> np.ndarray:
        """Distance of each angle outside ``[lo - slack, hi + slack]`` (0 inside, NaN kept)."""
        ang = np.asarray(angles, dtype=float)
        lo, hi = self.widened(slack)
        return np.maximum(np.maximum(lo - ang, ang - hi), 0.0)

    def __contains__(self, angle: float) -> bool:
        return self.lo <= angle <= self.hi


def theorem_cones(a: float, b: float, c: float, d: float) -> tuple[ConeInterval, ConeInterval]:
    """Gradient cone ``[min(a,c), max(b,d)]`` and admissible line cone.

    The line cone is ``[max(b,d) - pi/2, min(a,c) + pi/2]``.
    """
    if not c > b - HALF_PI:
        raise HypothesisError(f"c > b - pi/2 violated: c={c:.6g}, b - pi/2={b - HALF_PI:.6g}")
    if not d < HALF_PI + a:
        raise HypothesisError(f"d < pi/2 + a violated: d={d:.6g}, pi/2 + a={HALF_PI + a:.6g}")
    if not c <= d:
        raise HypothesisError(f"c <= d violated: c={c:.6g}, d={d:.6g}")
    lo, hi = min(a, c), max(b, d)
    return ConeInterval(lo, hi), ConeInterval(hi - HALF_PI, lo + HALF_PI)


def sample_interior(domain: PolygonalDomain, n: int, rng: np.random.Generator,
                    margin: float = 0.0) -> np.ndarray:
    """Uniform points inside ``domain`` by rejection, at least ``margin`` from every edge."""
    lo, hi = domain.vertices.min(axis=0), domain.vertices.max(axis=0)
    out = []
    count = 0
    while count < n:
        cand = rng.uniform(lo, hi, size=(max(2 * (n - count), 16), 2))
        keep = domain.inside(cand)
        if margin > 0:
            keep &= np.min(domain.segment_distances(cand), axis=1) >= margin
        cand = cand[keep]
        out.append(cand)
        count += len(cand)
    return np.concatenate(out)[:n]
