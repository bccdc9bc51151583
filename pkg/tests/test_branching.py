import math
from decimal import Decimal, localcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from gradcone.branching import (SNAPSHOT_COLUMNS, Atoms, BranchingMechanism, StableTail,
                                calibrate_particles, integrate_test_function, phi_eval, sample_offspring,
                                simulate_branching, simulate_coupled_branching, simulate_total_mass,
                                stable_tail_constant, stable_tail_factor, stable_tail_integral_quad,
                                step_offspring_law, write_snapshot_csv)
from gradcone.errors import CalibrationError, GeometryError, PopulationExplosion
from gradcone.reflected import RngStream


def test_stable_constant_at_one_half():
    # beta (1 + beta) / Gamma(1 - beta) = 0.75 / sqrt(pi)
    assert stable_tail_constant(0.5) == pytest.approx(0.75 / math.sqrt(math.pi), rel=1e-14)
    assert stable_tail_constant(0.5) == pytest.approx(0.42314218766081724, rel=1e-14)


@pytest.mark.parametrize("beta", [0.0, 1.0, -0.2])
def test_stable_constant_domain(beta):
    with pytest.raises(ValueError):
        stable_tail_constant(beta)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.01, 5.0))
def test_stable_closed_form_matches_quadrature(beta, lam):
    closed = phi_eval(BranchingMechanism(nu=StableTail(1.0, beta)), lam)
    assert closed == pytest.approx(stable_tail_integral_quad(beta, lam), rel=1e-7, abs=1e-9)


def test_stable_factor_sign():
    assert all(stable_tail_factor(b) < 0 for b in (0.1, 0.5, 0.9))


@given(st.floats(0.0, 10.0))
def test_binary_mechanism(lam):
    assert phi_eval(BranchingMechanism(0.0, 1.0), lam) == pytest.approx(-lam * lam)


def test_phi_vectorized_and_domain():
    mech = BranchingMechanism(1.0, 0.5)
    np.testing.assert_allclose(mech(np.array([0.0, 1.0, 2.0])), [0.0, 0.5, 0.0])
    assert isinstance(mech(1.0), float)
    with pytest.raises(ValueError):
        mech(-0.1)


@pytest.mark.parametrize("lam", [1e-8, 1e-4, 0.3, 4.0])
def test_atomic_measure_integral(lam):
    mech = BranchingMechanism(nu=Atoms(((0.5, 2.0), (3.0, 0.1))))
    with localcontext() as ctx:
        ctx.prec = 60
        direct = sum(Decimal(w) * (1 - (-Decimal(lam) * Decimal(u)).exp() - Decimal(lam) * Decimal(u))
                     for u, w in ((0.5, 2.0), (3.0, 0.1)))
    assert mech(lam) == pytest.approx(float(direct), rel=1e-9)


@pytest.mark.parametrize("atoms", [((0.0, 1.0),), ((1.0, -1.0),), ((math.inf, 1.0),)])
def test_atoms_validation(atoms):
    with pytest.raises(ValueError):
        Atoms(atoms)


def test_calibration_values():
    cal = calibrate_particles(BranchingMechanism(a1=2.0, b1=1.0), 10)
    assert cal.rate == 20.0
    assert cal.p2 == pytest.approx(0.55)
    assert cal.p0 == pytest.approx(0.45)


@pytest.mark.parametrize("mech, N", [
    (BranchingMechanism(b1=1.0, nu=StableTail(1.0, 0.5)), 10),
    (BranchingMechanism(a1=1.0, b1=0.0), 10),
    (BranchingMechanism(a1=30.0, b1=1.0), 10),
    (BranchingMechanism(b1=1.0), 0),
])
def test_calibration_errors(mech, N):
    with pytest.raises(CalibrationError):
        calibrate_particles(mech, N)


@given(st.floats(-1.0, 1.0), st.floats(1e-5, 0.05))
def test_step_law_has_exponential_mean(a1, dt):
    cal = calibrate_particles(BranchingMechanism(a1=a1, b1=1.0), 20)
    p_ext, q = step_offspring_law(cal, dt)
    assert 0 <= p_ext < 1 and 0 <= q < 1
    mean = (1 - p_ext) / (1 - q)
    assert mean == pytest.approx(math.exp(a1 * dt), rel=1e-9)


def test_critical_step_law_variance():
    # a critical binary lineage at rate r has offspring variance r t after time t
    cal = calibrate_particles(BranchingMechanism(b1=1.0), 50)
    dt = 1e-3
    p_ext, q = step_offspring_law(cal, dt)
    second = (1 - p_ext) * (1 + q) / (1 - q) ** 2
    assert second - 1.0 == pytest.approx(cal.rate * dt, rel=1e-12)


@pytest.mark.parametrize("law", ["exact", "thinned"])
def test_offspring_sampling_mean(law):
    cal = calibrate_particles(BranchingMechanism(b1=1.0), 100)
    z = sample_offspring(np.random.default_rng(0), 200_000, cal, 1e-3, law)
    assert z.min() >= 0
    assert abs(z.mean() - 1.0) < 5 * z.std() / math.sqrt(len(z))
    if law == "thinned":
        assert set(np.unique(z)) <= {0, 1, 2}


def test_unknown_offspring_law():
    cal = calibrate_particles(BranchingMechanism(b1=1.0), 10)
    with pytest.raises(ValueError):
        sample_offspring(np.random.default_rng(0), 3, cal, 1e-3, "poisson")


def test_coupled_system_bookkeeping(triangle, binary):
    pops = simulate_coupled_branching(triangle, (0.3, 0.1), (0.5, 0.1), binary, 40, 1e-3, 0.2, RngStream(4),
                                      n_outputs=4)
    assert [p.time for p in pops] == pytest.approx([0.0, 0.05, 0.1, 0.15, 0.2])
    first = pops[0]
    assert first.size == 40 and first.total_mass == pytest.approx(1.0)
    assert np.all(first.parent_ids == -1)
    for pop in pops:
        assert len(np.unique(pop.ids)) == pop.size
        assert np.all(pop.diff[:, 0] > 0)
        assert np.all(triangle.inside(pop.pos_x)) and np.all(triangle.inside(pop.pos_y))
        born = pop.parent_ids >= 0
        assert np.all(pop.birth_times[born] > 0)
        assert np.all(pop.birth_times <= pop.time + 1e-12)


def test_particles_view(triangle, binary):
    pop = simulate_coupled_branching(triangle, (0.3, 0.1), (0.5, 0.1), binary, 3, 1e-3, 0.0, RngStream(4))[0]
    p = pop.particles[0]
    assert p.mass == pytest.approx(1 / 3) and p.pos_x == (0.3, 0.1) and p.pos_y == (0.5, 0.1)


def test_single_projection_has_zero_difference(triangle, binary):
    pops = simulate_branching(triangle, (0.4, 0.1), binary, 30, 1e-3, 0.05, RngStream(1))
    assert np.all(pops[-1].diff == 0)


def test_start_outside_domain(triangle, binary):
    with pytest.raises(GeometryError):
        simulate_branching(triangle, (0.4, 0.5), binary, 30, 1e-3, 0.05, RngStream(1))


def test_population_cap(triangle):
    mech = BranchingMechanism(a1=2.0, b1=1.0)  # pure birth at rate 2 for N = 1
    with pytest.raises(PopulationExplosion):
        simulate_total_mass(mech, 1, 1e-2, 5.0, RngStream(0))


def test_integrate_test_function(triangle, binary):
    pop = simulate_coupled_branching(triangle, (0.3, 0.1), (0.5, 0.1), binary, 10, 1e-3, 0.0, RngStream(0))[0]
    assert integrate_test_function(pop, lambda p: p[:, 0]) == (0.3, 0.5)


def test_total_mass_is_a_martingale(binary):
    finals = np.array([simulate_total_mass(binary, 200, 1e-2, 0.5, RngStream(9, i))[-1] for i in range(300)])
    assert abs(finals.mean() - 1.0) < 4 * finals.std(ddof=1) / math.sqrt(len(finals))


def test_survival_probability_matches_feller(binary):
    # P(M_t > 0) -> 1 - exp(-1 / (b1 t)) for the Feller limit with unit initial mass
    finals = np.array([simulate_total_mass(binary, 200, 1e-2, 1.0, RngStream(3, i))[-1] for i in range(400)])
    alive = (finals > 0).mean()
    expected = 1 - math.exp(-1.0)
    assert abs(alive - expected) < 4 * math.sqrt(expected * (1 - expected) / len(finals))


def test_exact_law_oracle_by_quadrature():
    # P(Z = 0) solves the Kolmogorov equation p' = death - (birth + death) p + birth p^2
    cal = calibrate_particles(BranchingMechanism(a1=0.5, b1=1.0), 3)
    birth, death = cal.rate * cal.p2, cal.rate * cal.p0
    sol = integrate.solve_ivp(lambda t, p: death - (birth + death) * p + birth * p * p, (0, 0.1), [0.0],
                              rtol=1e-12, atol=1e-14)
    assert step_offspring_law(cal, 0.1)[0] == pytest.approx(sol.y[0, -1], rel=1e-8)


def test_snapshot_csv(triangle, binary, tmp_path):
    pops = simulate_coupled_branching(triangle, (0.3, 0.1), (0.5, 0.1), binary, 5, 1e-3, 0.01, RngStream(0),
                                      n_outputs=1)
    dest = tmp_path / "snap.csv"
    write_snapshot_csv(pops, dest)
    lines = dest.read_text().splitlines()
    assert lines[0] == ",".join(SNAPSHOT_COLUMNS)
    assert len(lines) == 1 + sum(p.size for p in pops)
