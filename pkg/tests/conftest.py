import math

import pytest

from gradcone.branching import BranchingMechanism
from gradcone.geometry import ObtuseTriangleSpec, build_obtuse_triangle, theorem_cones

A, B = -math.pi / 6, math.pi / 6
C, D = -math.pi / 4, math.pi / 4


@pytest.fixture(scope="session")
def triangle():
    return build_obtuse_triangle(ObtuseTriangleSpec(A, B))


@pytest.fixture(scope="session")
def cones():
    return theorem_cones(A, B, C, D)


@pytest.fixture(scope="session")
def binary():
    return BranchingMechanism(a1=0.0, b1=1.0)
