"""End-to-end acceptance suite; each test prints one PASS/FAIL line."""
import json
import math

import numpy as np
import pytest

from gradcone.branching import (BranchingMechanism, StableTail, phi_eval, simulate_coupled_branching,
                                stable_tail_constant, stable_tail_integral_quad)
from gradcone.cli import main
from gradcone.pde import (SolverConfig, assemble_operator, initial_data, mild_picard_trajectory, refine_mesh,
                          solve_semilinear)
from gradcone.reflected import PURPOSE_BRANCH, PURPOSE_COUPLE, RngStream, coupling_monitors, map_replicates, \
    simulate_coupled_pairs
from gradcone.verify import (check_cone, check_duality, check_monotone_along_lines, check_pathwise_domination,
                             feller_check)

pytestmark = pytest.mark.slow

A, B, C, D = -math.pi / 6, math.pi / 6, -math.pi / 4, math.pi / 4
BINARY = BranchingMechanism(a1=0.0, b1=1.0)


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def mesh4(triangle):
    return refine_mesh(triangle, 4)


def test_01_constant_data_follows_the_logistic_ode(mesh4, verdict):
    traj = solve_semilinear(mesh4, initial_data("constant", c=1.0), BINARY, SolverConfig(1e-4, 1.0))
    err = float(np.max(np.abs(traj.final.values - 1.0 / (1.0 + 1.0))))
    verdict(1, err <= 1e-4, f"max |u(1) - 1/2| = {err:.2e} (tol 1e-4)")


def test_02_linear_mechanism_grows_exponentially(mesh4, verdict):
    traj = solve_semilinear(mesh4, initial_data("constant", c=0.5), BranchingMechanism(a1=1.0, b1=0.0),
                            SolverConfig(1e-4, 1.0))
    rel = float(np.max(np.abs(traj.final.values / (0.5 * math.e) - 1.0)))
    verdict(2, rel <= 1e-4, f"relative error vs 0.5 e = {rel:.2e} (tol 1e-4)")


def test_03_heat_flow_conserves_mass(mesh4, verdict):
    op = assemble_operator(mesh4)
    bump = initial_data("gaussian_bump", center=(0.5, 0.1), width=0.08)
    traj = solve_semilinear(mesh4, bump, BranchingMechanism(), SolverConfig(1e-3, 1.0), op)
    mass = traj.values @ op.mass
    drift = float(np.max(np.abs(mass - mass[0])) / 1.0)
    verdict(3, drift <= 1e-10, f"lumped-mass drift over t=1: {drift:.2e} (tol 1e-10 per unit time)")


def test_04_mild_and_strong_solvers_agree(mesh4, verdict):
    op = assemble_operator(mesh4)
    gaps = []
    for dt in (2e-3, 1e-3, 5e-4):
        cfg = SolverConfig(dt, 0.5)
        strong = solve_semilinear(mesh4, initial_data("x1"), BINARY, cfg, op).final.values
        mild, _ = mild_picard_trajectory(mesh4, initial_data("x1"), BINARY, cfg, op)
        gaps.append(float(np.max(np.abs(strong - mild.final.values))))
    ok = max(gaps) <= 5e-3 and gaps[1] < gaps[0] and gaps[2] < gaps[1]
    verdict(4, ok, "max-norm gaps at dt=2e-3,1e-3,5e-4: " + ", ".join(f"{g:.2e}" for g in gaps))


def test_05_stable_tail_closed_form(verdict):
    worst_closed = worst_quad = 0.0
    for beta in (0.25, 0.5, 0.75):
        c1 = stable_tail_constant(beta)
        mech = BranchingMechanism(nu=StableTail(c1, beta))
        for lam in (0.5, 1.0, 2.0):
            target = -lam ** (1 + beta)
            worst_closed = max(worst_closed, abs(phi_eval(mech, lam) - target))
            worst_quad = max(worst_quad, abs(stable_tail_integral_quad(beta, lam, c1) - target))
    ok = worst_closed <= 1e-6 and worst_quad <= 1e-6
    verdict(5, ok, f"closed form err {worst_closed:.1e}, quadrature err {worst_quad:.1e} (tol 1e-6)")


def test_06_particle_system_matches_feller(verdict):
    rep = feller_check(BINARY, N=1000, M=400, dt=1e-3, t=0.5, lam=1.0, seed=20240606)
    ok = abs(rep.empirical - math.exp(-2 / 3)) <= 3 * rep.standard_error
    verdict(6, ok, f"E exp(-M_t) = {rep.empirical:.4f} +- {rep.standard_error:.4f}, "
                   f"oracle {rep.oracle:.4f}, z = {rep.z_score:.2f}")


def test_07_log_laplace_duality(triangle, verdict):
    x = (0.4, 0.1)
    const = initial_data("constant", c=1.0)
    # spatial motion is irrelevant for constant data and the offspring law is exact per step
    flat = check_duality(triangle, x, const, BINARY, 2000, 400, 1e-2, 1.0, 1.0 / (1.0 + 1.0), seed=71,
                         rel_tol=0.02)
    mesh5 = refine_mesh(triangle, 5)
    traj = solve_semilinear(mesh5, initial_data("x1"), BINARY, SolverConfig(1e-4, 0.25))
    spatial = check_duality(triangle, x, initial_data("x1"), BINARY, 2000, 400, 1e-3, 0.25, traj, seed=72,
                            rel_tol=0.05)
    verdict(7, flat.passed and spatial.passed,
            f"constant: mc {flat.mc_estimate:.4f} +- {flat.mc_standard_error:.4f} vs 0.5; "
            f"x1: mc {spatial.mc_estimate:.4f} +- {spatial.mc_standard_error:.4f} vs pde {spatial.pde_value:.4f}")


def _coupling_batch(triangle, line_cone, dt, n_rep=100, chunk=25):
    reports = []
    for start in range(0, n_rep, chunk):
        rngs = [RngStream(8, i, PURPOSE_COUPLE) for i in range(start, min(start + chunk, n_rep))]
        paths = simulate_coupled_pairs(triangle, (0.3, 0.1), (0.5, 0.1), dt, 0.5, rngs)
        reports.extend(coupling_monitors(p, line_cone) for p in paths)
    return reports


def test_08_coupling_invariants(triangle, cones, verdict):
    coarse = _coupling_batch(triangle, cones[1], 1e-4)
    fine = _coupling_batch(triangle, cones[1], 1e-5)
    exc_coarse = max(r.max_excursion for r in coarse)
    exc_fine = max(r.max_excursion for r in fine)
    ok = (all(r.interior_exact and r.ordering_ok and r.angle_ok for r in coarse)
          and all(r.passed for r in fine) and exc_fine <= exc_coarse)
    verdict(8, ok, f"{sum(r.passed for r in coarse)}/100 replicates pass at dt=1e-4; worst excursion "
                   f"beyond the line cone {exc_coarse:.2e} (dt=1e-4) -> {exc_fine:.2e} (dt=1e-5)")


def test_09_gradient_cone_reproduction(triangle, cones, verdict):
    grad_cone, line_cone = cones
    violations, final_report = [], None
    for level in (3, 4, 5):
        mesh = refine_mesh(triangle, level)
        traj = solve_semilinear(mesh, initial_data("x1"), BINARY, SolverConfig(1e-4, 0.5))
        rep = check_cone(traj, grad_cone)
        violations.append(rep.max_violation)
        if level == 5:
            final_report = rep
            mono = check_monotone_along_lines(traj.final, line_cone, n_lines=8)
    shrinking = all(v1 <= 1.2 * v0 for v0, v1 in zip(violations, violations[1:]))
    ok = final_report.passed and shrinking and mono.passed
    verdict(9, ok, f"max_violation by level 3,4,5: {violations}; slack {final_report.slack:.4f}; "
                   f"angles in [{final_report.angle_min:.4f}, {final_report.angle_max:.4f}]; "
                   f"monotone along 8 lines: {mono.passed}")


def test_10_pathwise_domination(triangle, verdict):
    x, y = (0.3, 0.1), (0.5, 0.1)

    def one(i):
        return simulate_coupled_branching(triangle, x, y, BINARY, 500, 1e-4, 0.25,
                                          RngStream(10, i, PURPOSE_BRANCH), n_outputs=10)

    runs = map_replicates(one, range(100))
    rep = check_pathwise_domination(runs, initial_data("x1"), triangle, x, y, A, B, C, D)
    verdict(10, rep.passed and rep.sandwich_ok,
            f"{rep.n_comparisons} comparisons, min gap {rep.min_gap:.3e}; estimates X {rep.estimate_X:.4f} "
            f"<= Y {rep.estimate_Y:.4f}")


def test_11_reports_do_not_depend_on_threads(tmp_path, verdict):
    cfg = tmp_path / "canonical.json"
    cfg.write_text(json.dumps({"seed": 11, "solver": {"level": 5, "dt": 1e-4, "t_end": 0.5}}))
    codes = [main(["cone", "--config", str(cfg), "--out", str(tmp_path / f"t{n}"), "--threads", str(n)])
             for n in (1, 4)]
    same = (tmp_path / "t1" / "report_cone.json").read_bytes() == (tmp_path / "t4" / "report_cone.json").read_bytes()
    verdict(11, codes == [0, 0] and same, f"exit codes {codes}; report_cone.json byte-identical: {same}")
