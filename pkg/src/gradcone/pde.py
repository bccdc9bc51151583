"""P1 finite elements for ``u_t = 1/2 Lap u + Phi(u)`` with natural Neumann data.

Meshes are uniform refinements of a triangular domain.  The mass matrix is
lumped, so the discrete operator is ``-M^{-1} A`` with ``A = K/2``.  Diffusion
is stepped explicitly or by implicit Euler; the reaction is always explicit.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .branching import BranchingMechanism, phi_eval
from .errors import GeometryError, PicardDiverged, SolverError, StabilityError
from .geometry import PolygonalDomain, angles_of, sample_interior


@dataclass(frozen=True, eq=False)
class TriMesh:
    domain: PolygonalDomain
    nodes: np.ndarray
    elements: np.ndarray
    level: int
    boundary: np.ndarray
    areas: np.ndarray = field(init=False, repr=False)
    # inverse of the edge matrix [p1 - p0, p2 - p0]^T per element, shape (m, 2, 2)
    inv_edges: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        p = self.nodes[self.elements]
        e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=1)
        det = e[:, 0, 0] * e[:, 1, 1] - e[:, 0, 1] * e[:, 1, 0]
        if np.any(det <= 0):
            raise GeometryError("degenerate or clockwise element")
        object.__setattr__(self, "areas", 0.5 * det)
        object.__setattr__(self, "inv_edges", np.linalg.inv(e))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def h(self) -> float:
        """Largest element diameter."""
        p = self.nodes[self.elements]
        edges = np.concatenate([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]])
        return float(np.max(np.hypot(edges[:, 0], edges[:, 1])))

    def basis_gradients(self) -> np.ndarray:
        """Gradients of the three hat functions per element, shape ``(m, 3, 2)``."""
        # column j of inv_edges is the gradient of the hat at local node j + 1
        g1, g2 = self.inv_edges[:, :, 0], self.inv_edges[:, :, 1]
        return np.stack([-g1 - g2, g1, g2], axis=1)

    def locate(self, pts, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
        """Element index (-1 if outside) and barycentric weights of each point."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        elem = np.full(len(pts), -1, dtype=np.int64)
        bary = np.zeros((len(pts), 3))
        p0 = self.nodes[self.elements[:, 0]]
        chunk = max(1, 2_000_000 // max(self.n_elements, 1))
        for s in range(0, len(pts), chunk):
            q = pts[s:s + chunk]
            rel = q[:, None, :] - p0[None, :, :]
            lam = np.einsum("ekm,pek->pem", self.inv_edges, rel)  # (p, e, 2)
            l0 = 1.0 - lam[..., 0] - lam[..., 1]
            worst = np.minimum(l0, np.minimum(lam[..., 0], lam[..., 1]))
            k = np.argmax(worst, axis=1)
            rows = np.arange(len(q))
            ok = worst[rows, k] >= -tol
            elem[s:s + chunk] = np.where(ok, k, -1)
            bary[s:s + chunk] = np.column_stack([l0[rows, k], lam[rows, k, 0], lam[rows, k, 1]])
        return elem, bary


def refine_mesh(domain: PolygonalDomain, level: int) -> TriMesh:
    """Uniform ``4**level`` refinement of a triangular domain.

    Nodes sit on the barycentric lattice ``V0 + (i e1 + j e2) / 2**level``,
    which is what ``level`` rounds of midpoint subdivision produce.
    """
    if len(domain.vertices) != 3:
        raise GeometryError("refine_mesh needs a triangle; general polygons need an external base mesh")
    if level < 0:
        raise ValueError("level must be >= 0")
    n = 2**level
    v0, v1, v2 = domain.vertices
    index = {}
    nodes, boundary = [], []
    for j in range(n + 1):
        for i in range(n + 1 - j):
            index[i, j] = len(nodes)
            nodes.append(v0 + (i / n) * (v1 - v0) + (j / n) * (v2 - v0))
            boundary.append(i == 0 or j == 0 or i + j == n)
    elements = []
    for j in range(n):
        for i in range(n - j):
            elements.append((index[i, j], index[i + 1, j], index[i, j + 1]))
            if i + j + 2 <= n:
                elements.append((index[i + 1, j], index[i + 1, j + 1], index[i, j + 1]))
    nodes = np.array(nodes)
    # snap the three corners exactly
    for (i, j), v in (((0, 0), v0), ((n, 0), v1), ((0, n), v2)):
        nodes[index[i, j]] = v
    return TriMesh(domain, nodes, np.array(elements, dtype=np.int64), level, np.array(boundary))


@dataclass(frozen=True, eq=False)
class Operator:
    """``A = K/2`` (stiffness, CSR), lumped mass ``m`` and the explicit step bound."""

    stiffness: sp.csr_matrix
    mass: np.ndarray
    dt_max: float

    def apply(self, u: np.ndarray) -> np.ndarray:
        """Discrete ``1/2 Lap u`` including the natural boundary flux."""
        return -(self.stiffness @ u) / self.mass


def assemble_operator(mesh: TriMesh) -> Operator:
    g = mesh.basis_gradients()
    local = 0.5 * mesh.areas[:, None, None] * np.einsum("eik,ejk->eij", g, g)
    rows = np.repeat(mesh.elements, 3, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, 3)).ravel()
    A = sp.csr_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes))
    A.sum_duplicates()
    mass = np.zeros(mesh.n_nodes)
    np.add.at(mass, mesh.elements.ravel(), np.repeat(mesh.areas / 3.0, 3))
    s = 1.0 / np.sqrt(mass)
    S = sp.diags(s) @ A @ sp.diags(s)
    if mesh.n_nodes <= 1500:
        lam_max = float(scipy.linalg.eigvalsh(S.toarray())[-1])
    else:
        lam_max = float(spla.eigsh(S, k=1, which="LA", return_eigenvectors=False)[0])
    return Operator(A, mass, 2.0 / lam_max if lam_max > 0 else math.inf)


@dataclass
class ScalarField:
    mesh: TriMesh
    values: np.ndarray
    time: float = 0.0

    def gradients(self) -> np.ndarray:
        """Per-element gradient of the P1 interpolant, shape ``(m, 2)``."""
        u = self.values[self.mesh.elements]
        du = np.column_stack([u[:, 1] - u[:, 0], u[:, 2] - u[:, 0]])
        return np.einsum("ekm,em->ek", self.mesh.inv_edges, du)

    def interpolate(self, pts) -> np.ndarray:
        elem, bary = self.mesh.locate(pts)
        vals = np.einsum("pi,pi->p", bary, self.values[self.mesh.elements[np.maximum(elem, 0)]])
        return np.where(elem >= 0, vals, np.nan)

    def integral(self, mass: np.ndarray | None = None) -> float:
        """Lumped-mass integral."""
        if mass is None:
            mass = assemble_operator(self.mesh).mass
        return float(mass @ self.values)


@dataclass
class Trajectory:
    mesh: TriMesh
    times: np.ndarray
    values: np.ndarray  # (n_times, n_nodes)

    def __len__(self) -> int:
        return len(self.times)

    def field(self, i: int) -> ScalarField:
        return ScalarField(self.mesh, self.values[i], float(self.times[i]))

    @property
    def fields(self) -> list[ScalarField]:
        return [self.field(i) for i in range(len(self))]

    @property
    def final(self) -> ScalarField:
        return self.field(len(self) - 1)

    def at(self, t: float) -> ScalarField:
        """Linear interpolation in time between stored fields."""
        if not self.times[0] - 1e-12 <= t <= self.times[-1] + 1e-12:
            raise ValueError(f"t={t} outside the stored range")
        if len(self) == 1:
            return self.field(0)
        k = int(np.clip(np.searchsorted(self.times, t), 1, len(self) - 1))
        t0, t1 = self.times[k - 1], self.times[k]
        s = min(max((t - t0) / (t1 - t0), 0.0), 1.0)
        return ScalarField(self.mesh, (1 - s) * self.values[k - 1] + s * self.values[k], float(t))


@dataclass(frozen=True)
class SolverConfig:
    dt: float
    t_end: float
    scheme: str = "imex"
    picard_tol: float = 1e-10
    picard_max_iter: int = 100
    output_schedule: str = "uniform"
    n_outputs: int = 10

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_end >= 0:
            raise ValueError("t_end must be nonnegative")
        if self.scheme not in ("explicit", "imex"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.output_schedule not in ("uniform", "geometric"):
            raise ValueError(f"unknown output schedule {self.output_schedule!r}")
        if self.picard_tol <= 0 or self.picard_max_iter < 1 or self.n_outputs < 1:
            raise ValueError("picard_tol, picard_max_iter and n_outputs must be positive")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    def output_steps(self) -> np.ndarray:
        n = self.n_steps
        if n == 0:
            return np.array([0])
        if self.output_schedule == "uniform":
            steps = np.round(np.linspace(0, n, self.n_outputs + 1))
        else:
            steps = np.round(np.geomspace(1, n, self.n_outputs))
        return np.unique(np.concatenate([[0, n], steps]).astype(int))


def _nodal(mesh: TriMesh, phi0) -> np.ndarray:
    if isinstance(phi0, ScalarField):
        vals = np.asarray(phi0.values, dtype=float)
    elif callable(phi0):
        vals = np.asarray(phi0(mesh.nodes), dtype=float)
    else:
        vals = np.asarray(phi0, dtype=float)
    if vals.shape != (mesh.n_nodes,):
        raise ValueError("initial data must give one value per node")
    if not np.all(np.isfinite(vals)) or np.any(vals < 0):
        raise ValueError("initial data must be finite and nonnegative")
    return vals.copy()


def reaction(mech: BranchingMechanism, u: np.ndarray) -> np.ndarray:
    """Nodal ``Phi(u)``; slight negative undershoots of the scheme get zero reaction."""
    return phi_eval(mech, np.maximum(u, 0.0))


class _HeatStep:
    """One linear diffusion step ``u -> R u`` and the IMEX update built on it."""

    def __init__(self, op: Operator, dt: float, scheme: str):
        self.op, self.dt, self.scheme = op, dt, scheme
        if scheme == "explicit":
            if dt > op.dt_max:
                raise StabilityError(f"explicit dt={dt:.3g} exceeds the stability bound {op.dt_max:.3g}")
            self._lu = None
        else:
            self._lu = spla.splu(sp.csc_matrix(sp.diags(op.mass) + dt * op.stiffness))

    def __call__(self, u: np.ndarray) -> np.ndarray:
        if self._lu is None:
            return u - self.dt * (self.op.stiffness @ u) / self.op.mass
        return self._lu.solve(self.op.mass * u)


def solve_semilinear(mesh: TriMesh, phi0, mech: BranchingMechanism, cfg: SolverConfig,
                     op: Operator | None = None) -> Trajectory:
    """Time-step the initial-boundary value problem and return stored fields."""
    op = op or assemble_operator(mesh)
    u = _nodal(mesh, phi0)
    step = _HeatStep(op, cfg.dt, cfg.scheme)
    n = cfg.n_steps
    record = set(cfg.output_steps().tolist())
    times, values = [0.0], [u.copy()]
    linear = mech.a1 == 0 and mech.b1 == 0 and mech.nu is None
    for k in range(n):
        u = step(u) if linear else step(u + cfg.dt * reaction(mech, u))
        if not np.all(np.isfinite(u)):
            raise SolverError(f"non-finite values at step {k + 1}")
        if k + 1 in record:
            times.append((k + 1) * cfg.dt)
            values.append(u.copy())
    return Trajectory(mesh, np.array(times), np.array(values))


def mild_picard_trajectory(mesh: TriMesh, phi0, mech: BranchingMechanism, cfg: SolverConfig,
                           op: Operator | None = None) -> tuple[Trajectory, int]:
    """Picard iteration for ``v(t) = S_t phi + int_0^t S_{t-s} Phi(v(s)) ds``.

    ``S`` is the linear diffusion step of ``cfg.scheme`` and the time integral
    is the trapezoid rule on the ``cfg.dt`` grid.  Returns the converged
    trajectory on every grid step and the number of sweeps used.
    """
    op = op or assemble_operator(mesh)
    phi = _nodal(mesh, phi0)
    R = _HeatStep(op, cfg.dt, cfg.scheme)
    n, dt = cfg.n_steps, cfg.dt
    free = np.empty((n + 1, mesh.n_nodes))
    free[0] = phi
    for k in range(n):
        free[k + 1] = R(free[k])
    v = free.copy()
    limit = 10.0 * float(np.max(np.abs(phi)))
    iters = 0
    for iters in range(1, cfg.picard_max_iter + 1):
        f = reaction(mech, v)
        new = free.copy()
        acc = dt * f[0]
        carry = f[0].copy()
        for k in range(1, n + 1):
            acc = R(acc) + dt * f[k]
            carry = R(carry)
            new[k] += acc - 0.5 * dt * (carry + f[k])
        if not np.all(np.isfinite(new)) or float(np.max(np.abs(new))) > limit > 0 or \
                (limit == 0 and np.any(new != 0)):
            raise PicardDiverged(f"iterate norm exceeded 10x the initial norm at sweep {iters}")
        change = float(np.max(np.abs(new - v)))
        v = new
        if change < cfg.picard_tol:
            break
    return Trajectory(mesh, dt * np.arange(n + 1), v), iters


def solve_mild_picard(mesh: TriMesh, phi0, mech: BranchingMechanism, cfg: SolverConfig,
                      op: Operator | None = None) -> ScalarField:
    traj, _ = mild_picard_trajectory(mesh, phi0, mech, cfg, op)
    return traj.final


def default_min_grad(field: ScalarField) -> float:
    rng = float(np.max(field.values) - np.min(field.values))
    return 1e-8 * rng / field.mesh.domain.diameter


def gradient_angles(field: ScalarField, min_grad: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-element gradient angle (NaN where masked) and the mask of small gradients."""
    if min_grad is None:
        min_grad = default_min_grad(field)
    g = field.gradients()
    mag = np.hypot(g[:, 0], g[:, 1])
    masked = mag <= min_grad
    ang = angles_of(g)
    ang[masked] = np.nan
    return ang, masked


class InitialData:
    """Named closed-form initial condition ``phi(p)`` evaluated on ``(n, 2)`` arrays."""

    def __init__(self, name: str, fn: Callable[[np.ndarray], np.ndarray], **params):
        self.name, self._fn, self.params = name, fn, params

    def __call__(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return self._fn(pts.reshape(-1, 2)).reshape(pts.shape[:-1])

    def describe(self) -> dict:
        return {"kind": self.name, **self.params}


def initial_data(kind: str, **params) -> InitialData:
    """Catalogue: ``x1``, ``x1_plus_x2`` (both take ``scale``, ``offset``),
    ``constant`` (``c``) and ``gaussian_bump`` (``center``, ``width``, ``height``)."""
    if kind in ("x1", "x1_plus_x2"):
        scale = float(params.get("scale", 1.0))
        offset = float(params.get("offset", 0.0))
        if kind == "x1":
            fn = lambda p: offset + scale * p[:, 0]  # noqa: E731
        else:
            fn = lambda p: offset + scale * (p[:, 0] + p[:, 1])  # noqa: E731
        return InitialData(kind, fn, scale=scale, offset=offset)
    if kind == "constant":
        c = float(params.get("c", 1.0))
        return InitialData(kind, lambda p: np.full(len(p), c), c=c)
    if kind == "gaussian_bump":
        center = np.asarray(params.get("center", (0.5, 0.1)), dtype=float)
        width = float(params.get("width", 0.1))
        height = float(params.get("height", 1.0))
        if width <= 0:
            raise ValueError("gaussian_bump width must be positive")
        fn = lambda p: height * np.exp(-np.sum((p - center) ** 2, axis=1) / (2 * width**2))  # noqa: E731
        return InitialData(kind, fn, center=center.tolist(), width=width, height=height)
    raise ValueError(f"unknown initial data kind {kind!r}")


def check_initial_data(phi: Callable, domain: PolygonalDomain, n_points: int = 200, seed: int = 0) -> None:
    """Nonnegativity and a finite-difference C^1 spot check at random interior points."""
    gen = np.random.default_rng(seed)
    h = 1e-4 * domain.diameter
    pts = sample_interior(domain, n_points, gen, margin=4 * h)
    vals = np.asarray(phi(np.vstack([pts, domain.vertices])), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise ValueError("initial data is not finite on the domain")
    if np.any(vals < 0):
        raise ValueError("initial data must be nonnegative on the domain")
    scale = max(float(np.max(np.abs(vals))), 1e-300)
    for e in (np.array([1.0, 0.0]), np.array([0.0, 1.0])):
        g1 = (phi(pts + h * e) - phi(pts - h * e)) / (2 * h)
        g2 = (phi(pts + 2 * h * e) - phi(pts - 2 * h * e)) / (4 * h)
        if np.max(np.abs(g1 - g2)) > 1e-3 * scale / domain.diameter + 1e-6 * np.max(np.abs(g1)):
            raise ValueError("initial data fails the C^1 finite-difference spot check")


NODE_COLUMNS = ("node_id", "x1", "x2", "boundary")
ELEMENT_COLUMNS = ("element_id", "n0", "n1", "n2")
FIELD_COLUMNS = ("node_id", "x1", "x2", "u")


def write_field_csv(field: ScalarField, dest) -> None:
    with open(dest, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(FIELD_COLUMNS)
        for i, (p, u) in enumerate(zip(field.mesh.nodes, field.values)):
            out.writerow([i, f"{p[0]:.17g}", f"{p[1]:.17g}", f"{u:.17g}"])


def write_mesh_csv(mesh: TriMesh, nodes_dest, elements_dest) -> None:
    with open(nodes_dest, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(NODE_COLUMNS)
        for i, (p, b) in enumerate(zip(mesh.nodes, mesh.boundary)):
            out.writerow([i, f"{p[0]:.17g}", f"{p[1]:.17g}", int(b)])
    with open(elements_dest, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(ELEMENT_COLUMNS)
        for i, e in enumerate(mesh.elements):
            out.writerow([i, *map(int, e)])
