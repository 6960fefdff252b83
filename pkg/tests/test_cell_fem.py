import numpy as np
import pytest

from biot_design.fem.cell_problems import (ElasticityTensor, corrector,
                                           solve_cell_problems)
from biot_design.geometry.cell_mesh import (CellMesh, ImplicitCellGeometry,
                                            generate_cross_sphere_mesh)
from biot_design.homogenization.coefficients import compute_coefficients
from biot_design.resources.basics import SolverException


def test_elasticity_tensor_validation():
    with pytest.raises(ValueError):
        ElasticityTensor(-np.eye(6))
    with pytest.raises(ValueError):
        ElasticityTensor(np.zeros((3, 3)))


def test_reference_residuals(reference_solution):
    assert reference_solution.residuals["elasticity"] < 1e-10
    assert reference_solution.residuals["divergence"] < 1e-10
    assert reference_solution.has_stokes


def test_corrector_is_symmetric_in_its_indices(reference_solution):
    for i in range(3):
        for j in range(3):
            np.testing.assert_array_equal(corrector(reference_solution, i, j), corrector(reference_solution, j, i))


def test_all_solid_correctors_vanish(solid_cell, elastic):
    sol = solve_cell_problems(solid_cell, elastic, stokes=True)
    assert not sol.has_stokes
    assert np.abs(sol.omega).max() < 1e-10
    assert np.abs(sol.omega_p).max() < 1e-14


def test_cell_without_solid_fails(elastic, reference_cell):
    fluid = CellMesh(
        nodes=reference_cell.nodes,
        hexes=reference_cell.hexes,
        labels=np.ones_like(reference_cell.labels),
        periodic_pairs=reference_cell.periodic_pairs,
        preimages=reference_cell.preimages,
        interface=np.zeros((0, 2), dtype=int),
    )
    with pytest.raises(SolverException):
        solve_cell_problems(fluid, elastic)


@pytest.mark.slow
def test_straight_channel_permeability(elastic):
    radius = 0.2
    # mean Poiseuille velocity over the unit cell
    exact = np.pi * radius ** 4 / 8.0
    errors = []
    for resolution in (12, 24):
        mesh = generate_cross_sphere_mesh(ImplicitCellGeometry((radius, 0.0, 0.0), 0.0), resolution=resolution)
        h = compute_coefficients(mesh, elastic, solve_cell_problems(mesh, elastic))
        errors.append(abs(h.K[0, 0] - exact) / exact)
        assert abs(h.K[0, 1]) < 1e-8
        assert abs(h.K[0, 2]) < 1e-8
    assert errors[1] < 0.05
    assert errors[1] < errors[0]
