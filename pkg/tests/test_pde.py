import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcone.branching import BranchingMechanism
from gradcone.errors import GeometryError, PicardDiverged, StabilityError
from gradcone.geometry import ObtuseTriangleSpec, PolygonalDomain, build_obtuse_triangle, sample_interior
from gradcone.pde import (ELEMENT_COLUMNS, FIELD_COLUMNS, NODE_COLUMNS, ScalarField, SolverConfig,
                          Trajectory, assemble_operator, check_initial_data, default_min_grad,
                          gradient_angles, initial_data, mild_picard_trajectory, refine_mesh,
                          solve_mild_picard, solve_semilinear, write_field_csv, write_mesh_csv)

NO_REACTION = BranchingMechanism()


@pytest.fixture(scope="module")
def mesh4(triangle):
    return refine_mesh(triangle, 4)


@pytest.fixture(scope="module")
def op4(mesh4):
    return assemble_operator(mesh4)


@pytest.mark.parametrize("level", [0, 1, 3, 4])
def test_lattice_counts(triangle, level):
    m = refine_mesh(triangle, level)
    n = 2**level
    assert m.n_nodes == (n + 1) * (n + 2) // 2
    assert m.n_elements == 4**level
    assert m.areas.sum() == pytest.approx(triangle.area, rel=1e-13)
    assert m.h == pytest.approx(1.0 / n)


def test_level_four_has_153_nodes(mesh4):
    assert mesh4.n_nodes == 153
    assert mesh4.boundary.sum() == 48


def test_refine_needs_a_triangle():
    square = PolygonalDomain(np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float))
    with pytest.raises(GeometryError):
        refine_mesh(square, 2)


def test_operator_kills_constants(mesh4, op4):
    assert np.max(np.abs(op4.apply(np.full(mesh4.n_nodes, 3.0)))) < 1e-11
    assert op4.mass.sum() == pytest.approx(mesh4.areas.sum(), rel=1e-13)


def test_operator_is_symmetric_positive(op4):
    K = op4.stiffness.toarray()
    np.testing.assert_allclose(K, K.T, atol=1e-14)
    assert np.linalg.eigvalsh(K).min() > -1e-12


def test_linear_field_has_zero_interior_laplacian(mesh4, op4):
    u = 2.0 * mesh4.nodes[:, 0] - 0.5 * mesh4.nodes[:, 1]
    lap = op4.apply(u)
    assert np.max(np.abs(lap[~mesh4.boundary])) < 1e-9


@pytest.mark.parametrize("g", [(1.0, 0.0), (0.3, -2.0), (-1.0, 1.0)])
def test_gradients_of_linear_fields_are_exact(mesh4, g):
    f = ScalarField(mesh4, mesh4.nodes @ np.array(g) + 4.0)
    np.testing.assert_allclose(f.gradients(), np.tile(g, (mesh4.n_elements, 1)), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_interpolation_reproduces_linear_fields(seed):
    tri = build_obtuse_triangle(ObtuseTriangleSpec(-0.4, 0.7))
    m = refine_mesh(tri, 3)
    pts = sample_interior(tri, 40, np.random.default_rng(seed))
    f = ScalarField(m, 1.0 + m.nodes[:, 0] - 3.0 * m.nodes[:, 1])
    np.testing.assert_allclose(f.interpolate(pts), 1.0 + pts[:, 0] - 3.0 * pts[:, 1], atol=1e-12)


def test_interpolation_outside_is_nan(mesh4):
    f = ScalarField(mesh4, np.ones(mesh4.n_nodes))
    assert np.isnan(f.interpolate([[0.5, -0.2]])[0])


def test_explicit_step_bound(mesh4, op4):
    phi = initial_data("x1")
    with pytest.raises(StabilityError):
        solve_semilinear(mesh4, phi, NO_REACTION, SolverConfig(2 * op4.dt_max, 0.1, scheme="explicit"), op4)
    dt = 1e-4
    assert dt < op4.dt_max
    explicit = solve_semilinear(mesh4, phi, NO_REACTION, SolverConfig(dt, 0.01, scheme="explicit"), op4)
    implicit = solve_semilinear(mesh4, phi, NO_REACTION, SolverConfig(dt, 0.01), op4)
    assert np.max(np.abs(explicit.final.values - implicit.final.values)) < 1e-3


def test_constant_is_a_fixed_point_of_the_heat_flow(mesh4):
    traj = solve_semilinear(mesh4, initial_data("constant", c=0.7), NO_REACTION, SolverConfig(1e-3, 0.2))
    np.testing.assert_allclose(traj.values, 0.7, rtol=1e-13)


@pytest.mark.parametrize("schedule", ["uniform", "geometric"])
def test_output_schedule(schedule):
    cfg = SolverConfig(1e-3, 0.5, output_schedule=schedule, n_outputs=5)
    steps = cfg.output_steps()
    assert steps[0] == 0 and steps[-1] == 500
    assert np.all(np.diff(steps) > 0)


@pytest.mark.parametrize("kwargs", [dict(dt=0.0, t_end=1.0), dict(dt=0.1, t_end=-1.0),
                                    dict(dt=0.1, t_end=1.0, scheme="rk4"), dict(dt=0.1, t_end=1.0, n_outputs=0)])
def test_solver_config_validation(kwargs):
    with pytest.raises(ValueError):
        SolverConfig(**kwargs)


def test_initial_data_must_be_nonnegative(mesh4):
    with pytest.raises(ValueError, match="nonnegative"):
        solve_semilinear(mesh4, initial_data("x1", offset=-0.5), NO_REACTION, SolverConfig(1e-3, 0.01))


def test_trajectory_time_interpolation(mesh4):
    vals = np.stack([np.zeros(mesh4.n_nodes), np.ones(mesh4.n_nodes)])
    traj = Trajectory(mesh4, np.array([0.0, 0.5]), vals)
    np.testing.assert_allclose(traj.at(0.125).values, 0.25)
    assert traj.at(0.5).time == 0.5
    with pytest.raises(ValueError):
        traj.at(0.6)


def test_linear_growth_matches_exponential(mesh4):
    traj = solve_semilinear(mesh4, initial_data("constant", c=0.5), BranchingMechanism(a1=1.0),
                            SolverConfig(1e-4, 0.5, n_outputs=2))
    assert traj.final.values.max() == pytest.approx(0.5 * math.exp(0.5), rel=1e-4)


def test_picard_agrees_with_time_stepping(mesh4, binary):
    cfg = SolverConfig(2e-3, 0.2)
    stepped = solve_semilinear(mesh4, initial_data("x1"), binary, cfg).final.values
    mild = solve_mild_picard(mesh4, initial_data("x1"), binary, cfg).values
    assert np.max(np.abs(stepped - mild)) < 2e-3


def test_picard_on_pure_heat_flow_needs_one_sweep(mesh4):
    traj, iters = mild_picard_trajectory(mesh4, initial_data("x1"), NO_REACTION, SolverConfig(1e-2, 0.1))
    assert iters == 1
    assert len(traj) == 11


def test_picard_divergence_is_reported(mesh4):
    with pytest.raises(PicardDiverged):
        solve_mild_picard(mesh4, initial_data("constant", c=1.0), BranchingMechanism(a1=5.0),
                          SolverConfig(1e-2, 1.0))


def test_gradient_masking(mesh4):
    ang, masked = gradient_angles(ScalarField(mesh4, np.full(mesh4.n_nodes, 2.0)))
    assert masked.all() and np.isnan(ang).all()
    f = ScalarField(mesh4, mesh4.nodes[:, 0].copy())
    ang, masked = gradient_angles(f)
    assert not masked.any()
    np.testing.assert_allclose(ang, 0.0, atol=1e-12)
    assert default_min_grad(f) == pytest.approx(1e-8)


@pytest.mark.parametrize("kind, params, at, expected", [
    ("x1", {}, (0.3, 0.1), 0.3),
    ("x1", {"scale": 2.0, "offset": 1.0}, (0.3, 0.1), 1.6),
    ("x1_plus_x2", {}, (0.3, 0.1), 0.4),
    ("constant", {"c": 2.5}, (0.3, 0.1), 2.5),
    ("gaussian_bump", {"center": (0.3, 0.1), "width": 0.1, "height": 2.0}, (0.3, 0.1), 2.0),
])
def test_initial_data_catalogue(kind, params, at, expected):
    phi = initial_data(kind, **params)
    assert phi(np.array([at]))[0] == pytest.approx(expected)
    assert phi.describe()["kind"] == kind


def test_unknown_initial_data():
    with pytest.raises(ValueError):
        initial_data("sin")


def test_initial_data_checks(triangle):
    check_initial_data(initial_data("gaussian_bump"), triangle)
    with pytest.raises(ValueError, match="nonnegative"):
        check_initial_data(initial_data("x1", scale=-1.0), triangle)
    with pytest.raises(ValueError, match="C\\^1"):
        check_initial_data(lambda p: np.abs(p[:, 0] - 0.5), triangle, n_points=2000)


def test_csv_writers(mesh4, tmp_path):
    f = ScalarField(mesh4, mesh4.nodes[:, 0].copy(), 0.0)
    write_field_csv(f, tmp_path / "f.csv")
    write_mesh_csv(mesh4, tmp_path / "n.csv", tmp_path / "e.csv")
    assert (tmp_path / "f.csv").read_text().splitlines()[0] == ",".join(FIELD_COLUMNS)
    assert (tmp_path / "n.csv").read_text().splitlines()[0] == ",".join(NODE_COLUMNS)
    assert len((tmp_path / "e.csv").read_text().splitlines()) == 1 + mesh4.n_elements
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == ",".join(ELEMENT_COLUMNS)
