"""Gradient-direction bounds for semilinear heat flow in obtuse triangles,
with the coupled branching-particle machinery used to check them."""
from .branching import (Atoms, BranchingMechanism, StableTail, calibrate_particles, phi_eval,
                        simulate_branching, simulate_coupled_branching, stable_tail_constant)
from .geometry import (ConeInterval, ObtuseTriangleSpec, PolygonalDomain, Point2, build_obtuse_triangle,
                       theorem_cones)
from .pde import (SolverConfig, assemble_operator, initial_data, refine_mesh, solve_mild_picard,
                  solve_semilinear)
from .reflected import RngStream, simulate_coupled_pair, step_rbm
from .verify import check_cone, check_duality, check_monotone_along_lines, check_pathwise_domination

__version__ = "0.1.0"

__all__ = [
    "Atoms", "BranchingMechanism", "ConeInterval", "ObtuseTriangleSpec", "Point2", "PolygonalDomain",
    "RngStream", "SolverConfig", "StableTail", "assemble_operator", "build_obtuse_triangle",
    "calibrate_particles", "check_cone", "check_duality", "check_monotone_along_lines",
    "check_pathwise_domination", "initial_data", "phi_eval", "refine_mesh", "simulate_branching",
    "simulate_coupled_branching", "simulate_coupled_pair", "solve_mild_picard", "solve_semilinear",
    "stable_tail_constant", "step_rbm", "theorem_cones",
]
