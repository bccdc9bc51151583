"""Checkers for the gradient cone, monotonicity along lines, log-Laplace duality
and pathwise domination of coupled branching systems."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .branching import (BranchingMechanism, CoupledPopulation, integrate_test_function,
                        simulate_branching, simulate_total_mass, write_snapshot_csv)
from .errors import HypothesisError
from .geometry import ConeInterval, PolygonalDomain, angles_of, sample_interior, theorem_cones
from .pde import ScalarField, Trajectory, default_min_grad, gradient_angles
from .reflected import PURPOSE_DUALITY, PURPOSE_FELLER, RngStream, map_replicates

SCHEMA_VERSION = 1


def to_jsonable(obj):
    """Plain JSON types for reports: dataclasses become dicts, NaN becomes None."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return None if not math.isfinite(obj) else float(obj)
    return obj


@dataclass
class ConeReport:
    cone: ConeInterval
    n_elements_checked: int
    n_masked: int
    max_violation: float
    slack: float
    angle_min: float | None
    angle_max: float | None
    worst_per_time: list[dict] = field(default_factory=list)
    passed: bool = True


def check_cone(trajectory: Trajectory | Sequence[ScalarField], cone: ConeInterval,
               min_grad: float | None = None, slack: float | None = None) -> ConeReport:
    """Angular distance of every unmasked element gradient outside ``cone``.

    ``slack`` defaults to twice the mesh size; the report passes when the
    worst violation does not exceed it.
    """
    fields = trajectory.fields if isinstance(trajectory, Trajectory) else list(trajectory)
    if not fields:
        raise ValueError("empty trajectory")
    if slack is None:
        slack = 2.0 * fields[0].mesh.h
    checked = masked_total = 0
    worst_all = 0.0
    lo = hi = None
    per_time = []
    for f in fields:
        ang, masked = gradient_angles(f, min_grad)
        checked += len(ang)
        masked_total += int(masked.sum())
        exc = cone.excursion(ang)
        if np.all(masked):
            per_time.append({"t": f.time, "element": None, "violation": 0.0})
            continue
        k = int(np.nanargmax(exc))
        per_time.append({"t": f.time, "element": k, "violation": float(exc[k])})
        worst_all = max(worst_all, float(exc[k]))
        amin, amax = float(np.nanmin(ang)), float(np.nanmax(ang))
        lo = amin if lo is None else min(lo, amin)
        hi = amax if hi is None else max(hi, amax)
    return ConeReport(cone, checked, masked_total, worst_all, float(slack), lo, hi, per_time,
                      passed=worst_all <= slack)


@dataclass
class MonotoneReport:
    passed: bool
    n_lines: int
    n_offsets: int
    n_samples: int
    tolerance: float
    worst_drop: float
    worst_pair: dict | None


def clip_line(domain: PolygonalDomain, origin: np.ndarray, direction: np.ndarray):
    """Parameter interval of ``origin + s * direction`` inside a convex polygon."""
    lo, hi = -np.inf, np.inf
    for n, c in zip(domain.normals, domain.offsets):
        rate = float(n @ direction)
        val = float(n @ origin - c)
        if abs(rate) < 1e-15:
            if val < 0:
                return None
            continue
        s = -val / rate
        if rate > 0:
            lo = max(lo, s)
        else:
            hi = min(hi, s)
    return (lo, hi) if hi > lo else None


def check_monotone_along_lines(field_: ScalarField, line_cone: ConeInterval, n_lines: int = 8,
                               n_samples: int = 64, n_offsets: int = 9) -> MonotoneReport:
    """Sample the interpolant along parallel chords whose directions span ``line_cone``.

    Values ordered by ``x1`` must be nondecreasing up to ``1e-10 * range(u)``.
    """
    domain = field_.mesh.domain
    if not domain.convex:
        raise ValueError("line sampling needs a convex domain")
    u = field_.values
    tol = 1e-10 * float(np.max(u) - np.min(u))
    if n_lines == 1:
        dirs = [0.5 * (line_cone.lo + line_cone.hi)]
    else:
        dirs = np.linspace(line_cone.lo, line_cone.hi, n_lines)
    worst, worst_pair = 0.0, None
    shrink = 1e-9 * domain.diameter
    for theta in dirs:
        e = np.array([math.cos(theta), math.sin(theta)])
        nrm = np.array([-e[1], e[0]])
        proj = domain.vertices @ nrm
        for j in range(n_offsets):
            off = proj.min() + (j + 1) / (n_offsets + 1) * (proj.max() - proj.min())
            origin = off * nrm
            span = clip_line(domain, origin, e)
            if span is None or span[1] - span[0] <= 2 * shrink:
                continue
            s = np.linspace(span[0] + shrink, span[1] - shrink, n_samples)
            pts = origin + s[:, None] * e
            vals = field_.interpolate(pts)
            keep = np.isfinite(vals)
            pts, vals = pts[keep], vals[keep]
            order = np.argsort(pts[:, 0], kind="stable")
            pts, vals = pts[order], vals[order]
            drops = vals[:-1] - vals[1:]
            if drops.size and drops.max() > worst:
                i = int(np.argmax(drops))
                worst = float(drops[i])
                worst_pair = {"direction": float(theta), "p_first": pts[i].tolist(),
                              "p_second": pts[i + 1].tolist(), "u_first": float(vals[i]),
                              "u_second": float(vals[i + 1])}
    return MonotoneReport(worst <= tol, len(dirs), n_offsets, n_samples, tol, worst, worst_pair)


def _neg_log_mean_exp(s: np.ndarray) -> tuple[float, float]:
    """``-log mean exp(-s)`` and its delta-method standard error."""
    s = np.asarray(s, dtype=float)
    m = len(s)
    lo = float(np.min(s))
    # shifting by the minimum keeps identical replicates exact
    est = lo - (logsumexp(lo - s) - math.log(m)) if np.any(s != lo) else lo
    if m < 2:
        return float(est), 0.0
    e = np.exp(lo - s)
    se = float(np.std(e, ddof=1) / math.sqrt(m) / np.mean(e))
    return float(est), se


@dataclass
class DualityReport:
    x: tuple[float, float]
    t: float
    pde_value: float
    mc_estimate: float
    mc_standard_error: float
    n_particles: int
    n_replicates: int
    rel_tol: float
    extinct_fraction: float
    suspicious: bool
    passed: bool


def check_duality(domain: PolygonalDomain, x, phi: Callable, mech: BranchingMechanism, N: int, M: int,
                  dt: float, t_end: float, pde: Trajectory | float, seed: int, rel_tol: float = 0.05,
                  threads: int = 1, scheme: str = "project") -> DualityReport:
    """Compare ``-log E exp(-<X_t, phi>)`` from ``M`` particle runs with the PDE value at ``x``."""
    x = np.asarray(x, dtype=float)
    if isinstance(pde, Trajectory):
        pde_value = float(pde.at(t_end).interpolate(x)[0])
    else:
        pde_value = float(pde)

    def one(i):
        pop = simulate_branching(domain, x, mech, N, dt, t_end, RngStream(seed, i, PURPOSE_DUALITY),
                                 n_outputs=1, scheme=scheme)[-1]
        return integrate_test_function(pop, phi)[0], pop.size == 0

    res = map_replicates(one, range(M), threads)
    s = np.array([r[0] for r in res])
    extinct = np.array([r[1] for r in res])
    est, se = _neg_log_mean_exp(s)
    suspicious = bool(np.all(extinct) and float(np.asarray(phi(x[None, :]))[0]) > 0 and t_end > 0)
    ok = abs(est - pde_value) <= max(3.0 * se, rel_tol * abs(pde_value))
    return DualityReport((float(x[0]), float(x[1])), float(t_end), pde_value, est, se, int(N), int(M),
                         float(rel_tol), float(extinct.mean()), suspicious, bool(ok))


@dataclass
class FellerReport:
    N: int
    n_replicates: int
    dt: float
    t: float
    lam: float
    empirical: float
    standard_error: float
    oracle: float
    z_score: float
    passed: bool


def feller_laplace_exponent(a1: float, b1: float, lam: float, t: float) -> float:
    """Solution of ``v' = a1 v - b1 v^2``, ``v(0) = lam``."""
    if a1 == 0:
        return lam / (1.0 + b1 * lam * t)
    g = math.exp(a1 * t)
    return a1 * lam * g / (a1 + b1 * lam * (g - 1.0))


def feller_check(mech: BranchingMechanism, N: int, M: int, dt: float, t: float, lam: float,
                 seed: int, threads: int = 1, offspring: str = "exact") -> FellerReport:
    """Empirical ``E exp(-lam M_t)`` of the total mass against the Feller diffusion."""

    def one(i):
        return simulate_total_mass(mech, N, dt, t, RngStream(seed, i, PURPOSE_FELLER), offspring)[-1]

    mass = np.array(map_replicates(one, range(M), threads))
    e = np.exp(-lam * mass)
    emp = float(e.mean())
    se = float(e.std(ddof=1) / math.sqrt(M)) if M > 1 else 0.0
    oracle = math.exp(-feller_laplace_exponent(mech.a1, mech.b1, lam, t))
    z = (emp - oracle) / se if se > 0 else (0.0 if emp == oracle else math.inf)
    return FellerReport(int(N), int(M), dt, t, lam, emp, se, oracle, float(z), abs(z) <= 3.0)


def verify_phi_hypothesis(phi: Callable, domain: PolygonalDomain, c: float, d: float,
                          n_points: int = 200, seed: int = 0) -> None:
    """Finite-difference check that the gradient angle of ``phi`` lies in ``(c, d)``.

    Points where the sampled gradient vanishes are skipped.
    """
    gen = np.random.default_rng(seed)
    h = 1e-6 * domain.diameter
    pts = sample_interior(domain, n_points, gen, margin=2 * h)
    gx = (phi(pts + [h, 0.0]) - phi(pts - [h, 0.0])) / (2 * h)
    gy = (phi(pts + [0.0, h]) - phi(pts - [0.0, h])) / (2 * h)
    g = np.column_stack([gx, gy])
    mag = np.hypot(gx, gy)
    scale = max(float(np.max(np.abs(phi(pts)))), 1.0) / domain.diameter
    live = mag > 1e-9 * scale
    ang = angles_of(g[live])
    bad = (ang <= c) | (ang >= d)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise HypothesisError(
            f"initial data gradient angle {ang[i]:.6g} at {pts[live][i].tolist()} is outside ({c:.6g}, {d:.6g})")


def check_start_pair(x, y, line_cone: ConeInterval) -> None:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if not x[0] < y[0]:
        raise HypothesisError("start pair needs x1 < y1")
    ang = math.atan2(y[1] - x[1], y[0] - x[0])
    if ang not in line_cone:
        raise HypothesisError(f"start line angle {ang:.6g} outside the admissible cone "
                              f"[{line_cone.lo:.6g}, {line_cone.hi:.6g}]")


@dataclass
class DominationReport:
    passed: bool
    n_replicates: int
    n_comparisons: int
    min_gap: float
    failures: list[dict]
    estimate_X: float
    estimate_Y: float
    estimate_X_se: float
    estimate_Y_se: float
    sandwich_ok: bool
    counterexample_file: str | None = None


def check_pathwise_domination(runs: Sequence[Sequence[CoupledPopulation]], phi: Callable,
                              domain: PolygonalDomain, x, y, a: float, b: float, c: float, d: float,
                              dump_dir: str | Path | None = None) -> DominationReport:
    """Check ``<X_t, phi> <= <Y_t, phi>`` at every stored time of every replicate.

    Also compares the two log-Laplace estimates built from the final
    snapshots.  On failure the first offending replicate is dumped as CSV
    into ``dump_dir`` if given.
    """
    _, line_cone = theorem_cones(a, b, c, d)
    check_start_pair(x, y, line_cone)
    verify_phi_hypothesis(phi, domain, c, d)
    failures = []
    gaps = []
    final_x, final_y = [], []
    for r, run in enumerate(runs):
        for pop in run:
            ix, iy = integrate_test_function(pop, phi)
            gaps.append(iy - ix)
            if not ix <= iy:
                failures.append({"replicate": r, "t": pop.time, "X": ix, "Y": iy})
        fx, fy = integrate_test_function(run[-1], phi)
        final_x.append(fx)
        final_y.append(fy)
    est_x, se_x = _neg_log_mean_exp(np.array(final_x))
    est_y, se_y = _neg_log_mean_exp(np.array(final_y))
    dump = None
    if failures and dump_dir is not None:
        dump = str(Path(dump_dir) / f"counterexample_replicate{failures[0]['replicate']}.csv")
        write_snapshot_csv(runs[failures[0]["replicate"]], dump)
    return DominationReport(
        passed=not failures,
        n_replicates=len(runs),
        n_comparisons=len(gaps),
        min_gap=float(min(gaps)) if gaps else 0.0,
        failures=failures,
        estimate_X=est_x,
        estimate_Y=est_y,
        estimate_X_se=se_x,
        estimate_Y_se=se_y,
        sandwich_ok=est_x <= est_y,
        counterexample_file=dump,
    )


def default_slack(mesh_h: float) -> float:
    return 2.0 * mesh_h


__all__ = [
    "SCHEMA_VERSION", "ConeReport", "DualityReport", "DominationReport", "FellerReport", "MonotoneReport",
    "check_cone", "check_duality", "check_monotone_along_lines", "check_pathwise_domination",
    "check_start_pair", "clip_line", "default_min_grad", "default_slack", "feller_check", "feller_laplace_exponent",
    "to_jsonable", "verify_phi_hypothesis",
]
