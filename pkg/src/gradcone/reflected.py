"""Reflected Brownian motion in polygons and synchronous couplings of two copies.

Boundary handling is a reflected Euler step: the raw Gaussian step is applied
and, if the candidate left the domain, it is either projected onto the nearest
boundary point (``"project"``, the default, which reproduces the running-minimum
formula exactly on a half-plane) or mirrored across the deepest violated edge
until it is back inside (``"mirror"``).  A coupled pair is stored as the left copy ``w`` plus the exact
difference vector ``z - w``; interior steps never touch the difference, so it
is bitwise constant between reflections.
"""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

from .errors import GeometryError, ReflectionDiverged
from .geometry import TOL, ConeInterval, PolygonalDomain, angles_of

MAX_REFLECTIONS = 8

# stream namespaces, one per consumer of randomness
PURPOSE_COUPLE = 1
PURPOSE_BRANCH = 2
PURPOSE_DUALITY = 3
PURPOSE_FELLER = 4
PURPOSE_HYPOTHESIS = 5

T = TypeVar("T")
R = TypeVar("R")


@dataclass(frozen=True)
class RngStream:
    """Seeded, replicate-indexed source of randomness.

    The generator is Philox keyed by ``SeedSequence(seed, spawn_key=(purpose,
    stream_id))``, so equal fields always give equal draws.
    """

    seed: int
    stream_id: int = 0
    purpose: int = 0

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.stream_id < 0 or self.purpose < 0:
            raise ValueError("stream_id and purpose must be nonnegative")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.purpose), int(self.stream_id)))
        return np.random.Generator(np.random.Philox(ss))


def streams(seed: int, n: int, purpose: int = 0) -> list[RngStream]:
    return [RngStream(seed, i, purpose) for i in range(n)]


def map_replicates(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> list[R]:
    """Ordered map over replicates; ``threads=0`` means one worker per CPU."""
    items = list(items)
    workers = (os.cpu_count() or 1) if threads == 0 else threads
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def n_steps_for(t_end: float, dt: float) -> int:
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t_end < 0:
        raise ValueError("t_end must be nonnegative")
    n = int(round(t_end / dt))
    if abs(n * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise ValueError(f"t_end={t_end} is not a multiple of dt={dt}")
    return n


def skorokhod_reflect(raw: Sequence[float]) -> np.ndarray:
    """Running-minimum reflection at zero: ``raw - min(0, min_{j<=k} raw_j)``."""
    raw = np.asarray(raw, dtype=float)
    if raw.size == 0:
        raise ValueError("empty path")
    if raw[0] < 0:
        raise ValueError("path must start in [0, inf)")
    return raw - np.minimum(0.0, np.minimum.accumulate(raw))


def reflect_points(domain: PolygonalDomain, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mirror each outside point back into ``domain``.

    Returns the corrected points and the first edge used per point (-1 if the
    point was already inside).
    """
    pts = np.array(pts, dtype=float).reshape(-1, 2)
    first = np.full(len(pts), -1, dtype=np.int64)
    idx = np.arange(len(pts))
    for _ in range(MAX_REFLECTIONS):
        hd = domain.halfplane_distances(pts[idx])
        if domain.convex:
            out = np.min(hd, axis=1) < -TOL
            idx, hd = idx[out], hd[out]
            if idx.size == 0:
                break
            k = np.argmin(hd, axis=1)
        else:
            out = ~domain.inside(pts[idx])
            idx, hd = idx[out], hd[out]
            if idx.size == 0:
                break
            sd = np.where(hd < -TOL, domain.segment_distances(pts[idx]), np.inf)
            k = np.argmin(sd, axis=1)
        depth = hd[np.arange(idx.size), k]
        pts[idx] -= 2.0 * depth[:, None] * domain.normals[k]
        first[idx] = np.where(first[idx] < 0, k, first[idx])
    else:
        still = ~domain.inside(pts[idx])
        if np.any(still):
            raise ReflectionDiverged(
                f"{int(still.sum())} point(s) still outside after {MAX_REFLECTIONS} reflections; "
                "dt is too large for this domain")
    return pts, first


def project_points(domain: PolygonalDomain, pts: np.ndarray):
    """Closest-point projection of outside points onto the boundary.

    Returns ``(points, edge, vertex)``: the edge whose segment holds the
    projection and, when the projection is a corner, that vertex index
    (-1 otherwise, and -1 for points already inside).
    """
    pts = np.array(pts, dtype=float).reshape(-1, 2)
    edge = np.full(len(pts), -1, dtype=np.int64)
    vertex = np.full(len(pts), -1, dtype=np.int64)
    out = np.nonzero(~domain.inside(pts))[0]
    if out.size:
        q = pts[out]
        e = domain.ends - domain.starts
        rel = q[:, None, :] - domain.starts[None, :, :]
        t = np.clip(np.einsum("pek,ek->pe", rel, e) / np.einsum("ek,ek->e", e, e), 0.0, 1.0)
        cp = domain.starts[None, :, :] + t[..., None] * e[None, :, :]
        gap = q[:, None, :] - cp
        k = np.argmin(np.hypot(gap[..., 0], gap[..., 1]), axis=1)
        rows = np.arange(out.size)
        tk = t[rows, k]
        pts[out] = cp[rows, k]
        edge[out] = k
        vertex[out] = np.where(tk <= 0.0, k, np.where(tk >= 1.0, (k + 1) % domain.n_edges, -1))
        # land exactly on the corner so later membership tests are clean
        at_v = vertex[out] >= 0
        pts[out[at_v]] = domain.starts[vertex[out[at_v]]]
    return pts, edge, vertex


BOUNDARY_SCHEMES = ("project", "mirror")


def _check_scheme(scheme: str) -> None:
    if scheme not in BOUNDARY_SCHEMES:
        raise ValueError(f"unknown boundary scheme {scheme!r}; expected one of {BOUNDARY_SCHEMES}")


def boundary_step(domain: PolygonalDomain, pts: np.ndarray, scheme: str = "project"):
    """Return points moved back into the domain and the edge used (-1 for none)."""
    if scheme == "mirror":
        return reflect_points(domain, pts)
    _check_scheme(scheme)
    pts, edge, _ = project_points(domain, pts)
    return pts, edge


def step_rbm(domain: PolygonalDomain, pos, increment, scheme: str = "project"):
    """One reflected Euler step; returns the new point and the edge used (or None)."""
    cand = np.asarray(pos, dtype=float) + np.asarray(increment, dtype=float)
    pts, edge = boundary_step(domain, cand, scheme)
    return pts[0], (None if edge[0] < 0 else int(edge[0]))


def _unit_tangents(domain: PolygonalDomain) -> np.ndarray:
    e = domain.ends - domain.starts
    return e / np.hypot(e[:, 0], e[:, 1])[:, None]


def coupled_step(domain: PolygonalDomain, w: np.ndarray, diff: np.ndarray, inc: np.ndarray,
                 scheme: str = "project"):
    """Advance pairs ``(w, z = w + diff)`` by the shared increments ``inc``.

    Returns ``(w_new, diff_new, edge_w, edge_z)``.  Rows where neither copy
    touched the boundary keep ``diff`` bitwise.  Under projection the
    difference is updated analytically when both copies land on the same
    edge (tangential part survives) or the same corner (successive
    tangential projections onto the two sides, which never vanish when the
    sides are not perpendicular).
    """
    wc = w + inc
    zc = (w + diff) + inc
    if scheme == "mirror":
        wr, ew = reflect_points(domain, wc)
        zr, ez = reflect_points(domain, zc)
        moved = (ew >= 0) | (ez >= 0)
        diff_new = diff.copy()
        diff_new[moved] = zr[moved] - wr[moved]
        return wr, diff_new, ew, ez
    _check_scheme(scheme)
    wr, ew, vw = project_points(domain, wc)
    zr, ez, vz = project_points(domain, zc)
    diff_new = diff.copy()
    moved = (ew >= 0) | (ez >= 0)
    diff_new[moved] = diff[moved] + (zr[moved] - zc[moved]) - (wr[moved] - wc[moved])

    tan = _unit_tangents(domain)
    same_edge = (ew >= 0) & (ew == ez) & (vw < 0) & (vz < 0)
    if np.any(same_edge):
        t = tan[ew[same_edge]]
        diff_new[same_edge] = np.einsum("ij,ij->i", t, diff[same_edge])[:, None] * t

    same_corner = (vw >= 0) & (vw == vz)
    if np.any(same_corner):
        rows = np.nonzero(same_corner)[0]
        v = vw[rows]
        e_in, e_out = (v - 1) % domain.n_edges, v
        mid = 0.5 * (wc[rows] + zc[rows])
        depth_in = np.einsum("ij,ij->i", domain.normals[e_in], mid) - domain.offsets[e_in]
        depth_out = np.einsum("ij,ij->i", domain.normals[e_out], mid) - domain.offsets[e_out]
        first = np.where(depth_in <= depth_out, e_in, e_out)
        second = np.where(first == e_in, e_out, e_in)
        t1, t2 = tan[first], tan[second]
        s = np.einsum("ij,ij->i", t2, t1) * np.einsum("ij,ij->i", t1, diff[rows])
        d = s[:, None] * t2
        corner = domain.starts[v]
        z_ok = domain.inside(corner + d)
        wr[rows] = np.where(z_ok[:, None], corner, corner - d)
        diff_new[rows] = d
    return wr, diff_new, ew, ez


@dataclass
class RbmPath:
    dt: float
    positions: np.ndarray       # (n_steps + 1, 2)
    reflected_edge: np.ndarray  # (n_steps,), -1 where no reflection

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(len(self.positions))


@dataclass
class CoupledPath:
    dt: float
    w_path: RbmPath
    z_path: RbmPath
    diff: np.ndarray            # (n_steps + 1, 2), exact z - w carried by the scheme
    K_angle: np.ndarray         # (n_steps + 1,)
    interior_step: np.ndarray   # (n_steps,) bool

    @property
    def n_steps(self) -> int:
        return len(self.interior_step)

    @property
    def times(self) -> np.ndarray:
        return self.w_path.times


def simulate_rbm(domain: PolygonalDomain, x, dt: float, t_end: float, rng: RngStream,
                 scheme: str = "project", increments: np.ndarray | None = None) -> RbmPath:
    """Single reflected path; ``increments`` overrides the stream's Gaussian draws."""
    n = n_steps_for(t_end, dt)
    if increments is None:
        increments = rng.generator().standard_normal((n, 2)) * math.sqrt(dt)
    pos = np.empty((n + 1, 2))
    edges = np.full(n, -1, dtype=np.int64)
    pos[0] = x
    for k in range(n):
        p, e = boundary_step(domain, pos[k] + increments[k], scheme)
        pos[k + 1], edges[k] = p[0], e[0]
    return RbmPath(dt, pos, edges)


def simulate_coupled_pairs(domain: PolygonalDomain, x, y, dt: float, t_end: float,
                           rngs: Sequence[RngStream], scheme: str = "project") -> list[CoupledPath]:
    """Independent synchronous couplings started from ``(x, y)``, one per stream.

    Replicates are advanced together as a batch, but each draws its increments
    only from its own stream, so a replicate's path does not depend on which
    other replicates share the batch.
    """
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if not np.all(domain.inside(np.vstack([x, y]))):
        raise GeometryError("both starting points must lie in the domain")
    if np.array_equal(x, y):
        raise GeometryError("starting points must differ")
    if y[0] < x[0]:
        x, y = y, x
    n = n_steps_for(t_end, dt)
    r = len(rngs)
    sq = math.sqrt(dt)
    inc = np.stack([s.generator().standard_normal((n, 2)) for s in rngs], axis=1) * sq if n else None
    w = np.empty((n + 1, r, 2))
    diff = np.empty((n + 1, r, 2))
    ew = np.full((n, r), -1, dtype=np.int64)
    ez = np.full((n, r), -1, dtype=np.int64)
    w[0] = x
    diff[0] = y - x
    for k in range(n):
        w[k + 1], diff[k + 1], ew[k], ez[k] = coupled_step(domain, w[k], diff[k], inc[k], scheme)
    paths = []
    for j in range(r):
        wj, dj = w[:, j].copy(), diff[:, j].copy()
        paths.append(CoupledPath(
            dt=dt,
            w_path=RbmPath(dt, wj, ew[:, j].copy()),
            z_path=RbmPath(dt, wj + dj, ez[:, j].copy()),
            diff=dj,
            K_angle=angles_of(dj),
            interior_step=(ew[:, j] < 0) & (ez[:, j] < 0),
        ))
    return paths


def simulate_coupled_pair(domain: PolygonalDomain, x, y, dt: float, t_end: float,
                          rng: RngStream, scheme: str = "project") -> CoupledPath:
    return simulate_coupled_pairs(domain, x, y, dt, t_end, [rng], scheme)[0]


@dataclass
class CouplingReport:
    ordering_ok: bool
    angle_ok: bool
    never_collide: bool
    interior_exact: bool
    min_separation: float
    max_excursion: float
    slack: float
    n_steps: int
    n_interior: int
    reflection_fraction: float

    @property
    def passed(self) -> bool:
        return self.ordering_ok and self.angle_ok and self.never_collide and self.interior_exact


def angle_slack(dt: float) -> float:
    return 4.0 * math.sqrt(dt)


def coupling_monitors(path: CoupledPath, line_cone: ConeInterval,
                      slack: float | None = None) -> CouplingReport:
    """Evaluate the ordering, line-angle, separation and constancy invariants."""
    if slack is None:
        slack = angle_slack(path.dt)
    d = path.diff
    sep = np.hypot(d[:, 0], d[:, 1])
    exc = line_cone.excursion(path.K_angle, slack)
    raw_exc = line_cone.excursion(path.K_angle)
    interior = path.interior_step
    same = np.all(d[1:] == d[:-1], axis=1)
    n = path.n_steps
    return CouplingReport(
        ordering_ok=bool(np.all(d[:, 0] > 0)),
        angle_ok=bool(np.all(exc == 0)),
        never_collide=bool(np.min(sep) > 0),
        interior_exact=bool(np.all(same[interior])),
        min_separation=float(np.min(sep)),
        max_excursion=float(np.max(raw_exc)),
        slack=float(slack),
        n_steps=n,
        n_interior=int(interior.sum()),
        reflection_fraction=float(1.0 - interior.mean()) if n else 0.0,
    )


TRACE_COLUMNS = ("step", "t", "w1", "w2", "z1", "z2", "K_angle", "interior")


def write_trace_csv(path: CoupledPath, dest) -> None:
    """Per-step dump of a coupled path; ``interior`` is 1 for the step ending at that row."""
    w, z = path.w_path.positions, path.z_path.positions
    interior = np.concatenate([[True], path.interior_step])
    with open(dest, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(TRACE_COLUMNS)
        for k in range(len(w)):
            out.writerow([k, f"{k * path.dt:.17g}", f"{w[k, 0]:.17g}", f"{w[k, 1]:.17g}",
                          f"{z[k, 0]:.17g}", f"{z[k, 1]:.17g}", f"{path.K_angle[k]:.17g}",
                          int(interior[k])])
