"""Branching mechanisms and (coupled) branching particle systems.

A mechanism is ``Phi(lam) = a1 lam - b1 lam^2 + int (1 - e^{-lam u} - lam u) nu(du)``.
Particle systems of resolution ``N`` carry mass ``1/N`` per particle and branch
at rate ``r = 2 b1 N`` into 0 or 2 offspring, which approximates the
superprocess whose log-Laplace exponent solves ``u' = Lu + Phi(u)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, special

from .errors import CalibrationError, GeometryError, PopulationExplosion
from .geometry import PolygonalDomain
from .reflected import RngStream, _check_scheme, boundary_step, coupled_step, n_steps_for

POPULATION_CAP = 64


@dataclass(frozen=True)
class StableTail:
    """``nu(du) = c1 u^{-2-beta} du``."""

    c1: float
    beta: float

    def __post_init__(self):
        if not self.c1 > 0:
            raise ValueError("c1 must be positive")
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")


@dataclass(frozen=True)
class Atoms:
    """Finite atomic measure ``sum_i weight_i delta_{u_i}``."""

    atoms: tuple[tuple[float, float], ...]

    def __post_init__(self):
        atoms = tuple((float(u), float(w)) for u, w in self.atoms)
        for u, w in atoms:
            if not (u > 0 and w > 0 and math.isfinite(u) and math.isfinite(w)):
                raise ValueError(f"atom ({u}, {w}) needs finite positive location and weight")
        if not math.isfinite(sum(w * min(u, u * u) for u, w in atoms)):
            raise ValueError("atoms violate the integrability condition")
        object.__setattr__(self, "atoms", atoms)


@dataclass(frozen=True)
class BranchingMechanism:
    a1: float = 0.0
    b1: float = 0.0
    nu: StableTail | Atoms | None = None

    def __post_init__(self):
        if not self.b1 >= 0:
            raise ValueError("b1 must be nonnegative")
        if not math.isfinite(self.a1):
            raise ValueError("a1 must be finite")

    def __call__(self, lam):
        return phi_eval(self, lam)


def _one_minus_exp_minus_linear(x):
    """``1 - e^{-x} - x`` without cancellation for small ``x``."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-3
    series = -x * x * (0.5 - x / 6.0 + x * x / 24.0)
    return np.where(small, series, -np.expm1(-x) - x)


def stable_tail_factor(beta: float) -> float:
    """``int_0^inf (1 - e^{-w} - w) w^{-2-beta} dw = -Gamma(1-beta) / (beta (1+beta))``."""
    return -special.gamma(1.0 - beta) / (beta * (1.0 + beta))


def phi_eval(mech: BranchingMechanism, lam):
    """Evaluate the branching mechanism; accepts scalars or arrays with ``lam >= 0``."""
    lam_arr = np.asarray(lam, dtype=float)
    if np.any(lam_arr < 0) or np.any(np.isnan(lam_arr)):
        raise ValueError("Phi is defined for lambda >= 0 only")
    out = mech.a1 * lam_arr - mech.b1 * lam_arr**2
    nu = mech.nu
    if isinstance(nu, StableTail):
        out = out + nu.c1 * stable_tail_factor(nu.beta) * lam_arr ** (1.0 + nu.beta)
    elif isinstance(nu, Atoms):
        for u, w in nu.atoms:
            out = out + w * _one_minus_exp_minus_linear(lam_arr * u)
    return float(out) if np.ndim(lam) == 0 else out


def stable_tail_integral_quad(beta: float, lam: float, c1: float = 1.0) -> float:
    """Quadrature of ``c1 int_0^inf (1 - e^{-lam u} - lam u) u^{-2-beta} du``.

    The range is split at ``u = 1``; on ``[1, inf)`` the substitution
    ``u = 1/s`` turns the tail into ``int_0^1 (1 - e^{-lam/s}) s^beta ds - lam/beta``.
    Independent of :func:`stable_tail_factor`.
    """
    if lam == 0:
        return 0.0
    head, _ = integrate.quad(lambda u: float(_one_minus_exp_minus_linear(lam * u)) * u ** (-2.0 - beta),
                             0.0, 1.0, epsabs=1e-13, epsrel=1e-12, limit=200)
    tail, _ = integrate.quad(lambda s: -math.expm1(-lam / s) * s**beta if s > 0 else 0.0,
                             0.0, 1.0, epsabs=1e-13, epsrel=1e-12, limit=200)
    return c1 * (head + tail - lam / beta)


def stable_tail_constant(beta: float) -> float:
    """``c1`` such that the pure stable tail gives ``Phi(lam) = -lam^{1+beta}``."""
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    return beta * (1.0 + beta) / special.gamma(1.0 - beta)


@dataclass(frozen=True)
class Calibration:
    rate: float
    p0: float
    p2: float
    N: int


def calibrate_particles(mech: BranchingMechanism, N: int) -> Calibration:
    """Binary branching rate and offspring law for resolution ``N``."""
    if mech.nu is not None:
        raise CalibrationError("particle calibration is only available for nu=None")
    if N < 1:
        raise CalibrationError("N must be a positive integer")
    if mech.b1 <= 0:
        raise CalibrationError("b1 = 0 has no critical binary calibration")
    r = 2.0 * mech.b1 * N
    if abs(mech.a1) > r:
        raise CalibrationError(f"|a1|={abs(mech.a1)} exceeds the branching rate {r}")
    p2 = 0.5 + mech.a1 / (2.0 * r)
    return Calibration(rate=r, p0=1.0 - p2, p2=p2, N=int(N))


def step_offspring_law(cal: Calibration, dt: float) -> tuple[float, float]:
    """Exact one-step law of a binary birth-death lineage over ``dt``.

    Returns ``(p_extinct, q)``: zero descendants with probability
    ``p_extinct``, otherwise a geometric count ``P(k) = (1-q) q^{k-1}``.
    """
    birth, death = cal.rate * cal.p2, cal.rate * cal.p0
    growth = (birth - death) * dt
    if abs(growth) < 1e-12:
        x = birth * dt
        return x / (1.0 + x), x / (1.0 + x)
    rho = math.exp(growth)
    den = birth * rho - death
    return death * (rho - 1.0) / den, birth * (rho - 1.0) / den


def sample_offspring(gen: np.random.Generator, n: int, cal: Calibration, dt: float,
                     law: str = "exact") -> np.ndarray:
    """Number of descendants after ``dt`` for each of ``n`` particles."""
    if law == "exact":
        p_ext, q = step_offspring_law(cal, dt)
        u = gen.random(n)
        counts = gen.geometric(1.0 - q, size=n) if q > 0 else np.ones(n, dtype=np.int64)
        return np.where(u < p_ext, 0, counts)
    if law == "thinned":
        u = gen.random(n)
        v = gen.random(n)
        fire = u < -math.expm1(-cal.rate * dt)
        return np.where(fire, np.where(v < cal.p2, 2, 0), 1)
    raise ValueError(f"unknown offspring law {law!r}")


@dataclass(frozen=True)
class PairedParticle:
    id: int
    parent_id: int
    birth_time: float
    mass: float
    pos_x: tuple[float, float]
    pos_y: tuple[float, float]


@dataclass
class CoupledPopulation:
    """Paired particles; ``pos_y = pos_x + diff`` row by row."""

    N: int
    time: float
    ids: np.ndarray
    parent_ids: np.ndarray
    birth_times: np.ndarray
    pos_x: np.ndarray
    diff: np.ndarray

    @property
    def mass(self) -> float:
        return 1.0 / self.N

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def pos_y(self) -> np.ndarray:
        return self.pos_x + self.diff

    @property
    def total_mass(self) -> float:
        return self.size / self.N

    @property
    def particles(self) -> list[PairedParticle]:
        y = self.pos_y
        return [PairedParticle(int(i), int(p), float(b), self.mass, tuple(map(float, px)), tuple(map(float, py)))
                for i, p, b, px, py in zip(self.ids, self.parent_ids, self.birth_times, self.pos_x, y)]


def integrate_test_function(pop: CoupledPopulation, phi: Callable[[np.ndarray], np.ndarray]) -> tuple[float, float]:
    """Return ``(<X, phi>, <Y, phi>)`` for the two projections of ``pop``."""
    if pop.size == 0:
        return 0.0, 0.0
    fx = np.asarray(phi(pop.pos_x), dtype=float)
    fy = np.asarray(phi(pop.pos_y), dtype=float)
    return math.fsum(fx) / pop.N, math.fsum(fy) / pop.N


def _output_steps(n_steps: int, n_outputs: int | None) -> np.ndarray:
    if n_outputs is None or n_outputs >= n_steps:
        return np.arange(n_steps + 1)
    return np.unique(np.round(np.linspace(0, n_steps, n_outputs + 1)).astype(int))


def simulate_coupled_branching(domain: PolygonalDomain, x, y, mech: BranchingMechanism, N: int,
                               dt: float, t_end: float, rng: RngStream, n_outputs: int | None = 10,
                               scheme: str = "project", offspring: str = "exact",
                               coupled: bool = True) -> list[CoupledPopulation]:
    """Branching system whose lineages each carry a synchronously coupled pair.

    Each particle draws one Gaussian increment per step and applies it to both
    of its positions; branching is shared, so the two projections always hold
    the same number of particles.  Snapshots are returned at ``n_outputs + 1``
    evenly spaced steps (every step if ``n_outputs`` is None).  With
    ``coupled=False`` only the first projection is moved (``diff`` stays 0).
    """
    _check_scheme(scheme)
    cal = calibrate_particles(mech, N)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y if coupled else x, dtype=float)
    if not np.all(domain.inside(np.vstack([x, y]))):
        raise GeometryError("starting points must lie in the domain")
    n_steps = n_steps_for(t_end, dt)
    record = set(_output_steps(n_steps, n_outputs).tolist())
    gen = rng.generator()
    sq = math.sqrt(dt)
    cap = POPULATION_CAP * N

    ids = np.arange(N, dtype=np.int64)
    parents = np.full(N, -1, dtype=np.int64)
    births = np.zeros(N)
    w = np.tile(x, (N, 1))
    d = np.tile(y - x, (N, 1))
    next_id = N
    out = []

    def snap(k):
        out.append(CoupledPopulation(N, k * dt, ids.copy(), parents.copy(), births.copy(), w.copy(), d.copy()))

    if 0 in record:
        snap(0)
    for k in range(n_steps):
        n = len(ids)
        if n:
            inc = gen.standard_normal((n, 2)) * sq
            if coupled:
                w, d, _, _ = coupled_step(domain, w, d, inc, scheme)
            else:
                w, _ = boundary_step(domain, w + inc, scheme)
            counts = sample_offspring(gen, n, cal, dt, offspring)
            total = int(counts.sum())
            if total > cap:
                raise PopulationExplosion(
                    f"population reached {total} > {cap} particles at t={(k + 1) * dt:.6g}")
            split = counts >= 2
            new_ids = ids.copy()
            new_parents = parents.copy()
            new_births = births.copy()
            if np.any(split):
                n_new = int(counts[split].sum())
                fresh = np.arange(next_id, next_id + n_new, dtype=np.int64)
                next_id += n_new
                new_ids = np.repeat(new_ids, counts)
                new_parents = np.repeat(new_parents, counts)
                new_births = np.repeat(new_births, counts)
                is_child = np.repeat(split, counts)
                new_ids[is_child] = fresh
                new_parents[is_child] = np.repeat(ids[split], counts[split])
                new_births[is_child] = (k + 1) * dt
            else:
                keep = counts == 1
                new_ids, new_parents, new_births = new_ids[keep], new_parents[keep], new_births[keep]
            w = np.repeat(w, counts, axis=0)
            d = np.repeat(d, counts, axis=0)
            ids, parents, births = new_ids, new_parents, new_births
        if k + 1 in record:
            snap(k + 1)
    return out


def simulate_branching(domain: PolygonalDomain, x, mech: BranchingMechanism, N: int, dt: float,
                       t_end: float, rng: RngStream, n_outputs: int | None = 1, scheme: str = "project",
                       offspring: str = "exact") -> list[CoupledPopulation]:
    """Single-projection system started from ``N`` particles at ``x``."""
    return simulate_coupled_branching(domain, x, x, mech, N, dt, t_end, rng, n_outputs, scheme,
                                      offspring, coupled=False)


def simulate_total_mass(mech: BranchingMechanism, N: int, dt: float, t_end: float, rng: RngStream,
                        offspring: str = "exact") -> np.ndarray:
    """Total-mass path of the non-spatial system at every step (``n_k / N``)."""
    cal = calibrate_particles(mech, N)
    n_steps = n_steps_for(t_end, dt)
    gen = rng.generator()
    counts = np.empty(n_steps + 1, dtype=np.int64)
    counts[0] = N
    cap = POPULATION_CAP * N
    if offspring == "exact":
        p_ext, q = step_offspring_law(cal, dt)
    for k in range(n_steps):
        n = int(counts[k])
        if n == 0:
            counts[k + 1:] = 0
            break
        if offspring == "exact":
            alive = int(gen.binomial(n, 1.0 - p_ext))
            # sum of `alive` geometric(1-q) counts = alive + failures of NB(alive, 1-q)
            extra = int(gen.negative_binomial(alive, 1.0 - q)) if alive and q > 0 else 0
            counts[k + 1] = alive + extra
        else:
            counts[k + 1] = int(sample_offspring(gen, n, cal, dt, offspring).sum())
        if counts[k + 1] > cap:
            raise PopulationExplosion(f"population reached {counts[k + 1]} > {cap}")
    return counts / N


SNAPSHOT_COLUMNS = ("t", "particle_id", "parent_id", "mass", "x1", "x2", "y1", "y2")


def write_snapshot_csv(pops: Sequence[CoupledPopulation], dest) -> None:
    with open(dest, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(SNAPSHOT_COLUMNS)
        for pop in pops:
            y = pop.pos_y
            for i in range(pop.size):
                out.writerow([f"{pop.time:.17g}", int(pop.ids[i]), int(pop.parent_ids[i]), f"{pop.mass:.17g}",
                              f"{pop.pos_x[i, 0]:.17g}", f"{pop.pos_x[i, 1]:.17g}",
                              f"{y[i, 0]:.17g}", f"{y[i, 1]:.17g}"])
