import os

import hypothesis
import numpy as np
import pytest

from biot_design.fem.cell_problems import ElasticityTensor, solve_cell_problems
from biot_design.geometry.cell_mesh import (ImplicitCellGeometry,
                                            generate_cross_sphere_mesh)
from biot_design.geometry.spline_box import build_box
from biot_design.homogenization.coefficients import compute_coefficients
from biot_design.homogenization.tensors import HomCoefficients, isotropic_stiffness

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "ci"))


@pytest.fixture(scope="session")
def box():
    return build_box()


@pytest.fixture(scope="session")
def elastic():
    return ElasticityTensor.isotropic(1.0, 0.3)


@pytest.fixture(scope="session")
def solid_cell():
    return generate_cross_sphere_mesh(ImplicitCellGeometry((0.0, 0.0, 0.0), 0.0), resolution=8)


@pytest.fixture(scope="session")
def reference_cell():
    return generate_cross_sphere_mesh(ImplicitCellGeometry(), resolution=8)


@pytest.fixture(scope="session")
def reference_solution(reference_cell, elastic):
    return solve_cell_problems(reference_cell, elastic, stokes=True)


@pytest.fixture(scope="session")
def reference_coefficients(reference_cell, elastic, reference_solution):
    return compute_coefficients(reference_cell, elastic, reference_solution)


@pytest.fixture(scope="session")
def synthetic_coefficients():
    """Anisotropic macroscopic coefficients with a weak coupling."""
    k = np.array([[1.0, 0.1, 0.0], [0.1, 0.5, 0.0], [0.0, 0.0, 0.25]])
    return HomCoefficients(
        A=isotropic_stiffness(10.0, 0.3), C=0.01 * np.eye(3), N=0.05, K=k, phi=0.02
    )
