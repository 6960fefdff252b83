import numpy as np
import pytest

from biot_design.fem.cell_problems import solve_cell_problems
from biot_design.geometry.spline_box import design_velocity
from biot_design.homogenization import sensitivity
from biot_design.homogenization.coefficients import compute_coefficients
from biot_design.homogenization.sensitivity import (chain_gradient,
                                                    check_gradients, delta_A,
                                                    delta_B_M, delta_C,
                                                    delta_K, delta_N,
                                                    delta_phi,
                                                    shape_gradients)


def test_translation_is_annihilated(reference_cell, elastic, reference_solution):
    v = np.tile([0.3, -0.2, 0.7], (reference_cell.n_nodes, 1))
    assert np.abs(delta_A(reference_cell, elastic, reference_solution, v)).max() < 1e-12
    assert np.abs(delta_C(reference_cell, elastic, reference_solution, v)).max() < 1e-12
    assert abs(delta_N(reference_cell, elastic, reference_solution, v)) < 1e-12
    assert abs(delta_phi(reference_cell, v)) < 1e-12
    assert np.abs(delta_K(reference_cell, reference_solution, v)).max() < 1e-12


def test_dilation(reference_cell, elastic, reference_solution, reference_coefficients):
    h = reference_coefficients
    v = reference_cell.nodes.copy()
    assert np.abs(delta_A(reference_cell, elastic, reference_solution, v)).max() < 1e-9 * np.abs(h.A).max()
    assert np.abs(delta_C(reference_cell, elastic, reference_solution, v)).max() < 1e-9 * np.abs(h.C).max()
    assert abs(delta_N(reference_cell, elastic, reference_solution, v)) < 1e-9 * h.N
    assert abs(delta_phi(reference_cell, v)) < 1e-12
    # permeability scales with the square of the cell size
    np.testing.assert_allclose(delta_K(reference_cell, reference_solution, v), 2.0 * h.K, atol=1e-9 * np.abs(h.K).max())


def test_shape_gradients_are_symmetric(reference_cell, elastic, reference_solution):
    sg = shape_gradients(reference_cell, elastic, reference_solution)
    np.testing.assert_allclose(sg.A, np.swapaxes(sg.A, 0, 1), atol=1e-10 * np.abs(sg.A).max())
    np.testing.assert_allclose(sg.K, np.swapaxes(sg.K, 0, 1), atol=1e-12 * np.abs(sg.K).max())


def test_chain_gradient_matches_velocity_fields(box, reference_cell, elastic, reference_solution, reference_coefficients):
    grads = chain_gradient(box, reference_cell, elastic, reference_solution, reference_coefficients)
    for c in (0, 187, box.n_shape_free - 5):
        v = design_velocity(box, reference_cell.preimages, c)
        np.testing.assert_allclose(grads.K[c], delta_K(reference_cell, reference_solution, v), atol=1e-14)
        assert grads.phi[c] == pytest.approx(delta_phi(reference_cell, v), abs=1e-14)


def test_precomputed_shape_gradients_are_reused(reference_cell, elastic, reference_solution, monkeypatch):
    v = np.random.default_rng(5).normal(size=(reference_cell.n_nodes, 3))
    expected = {
        "A": delta_A(reference_cell, elastic, reference_solution, v),
        "C": delta_C(reference_cell, elastic, reference_solution, v),
        "N": delta_N(reference_cell, elastic, reference_solution, v),
        "phi": delta_phi(reference_cell, v),
        "K": delta_K(reference_cell, reference_solution, v),
    }
    sg = shape_gradients(reference_cell, elastic, reference_solution)

    def fail(*args):
        raise AssertionError("shape gradients recomputed")

    monkeypatch.setattr(sensitivity, "shape_gradients", fail)
    monkeypatch.setattr(sensitivity, "_fluid_gradients", fail)
    found = {
        "A": delta_A(reference_cell, elastic, reference_solution, v, grads=sg),
        "C": delta_C(reference_cell, elastic, reference_solution, v, grads=sg),
        "N": delta_N(reference_cell, elastic, reference_solution, v, grads=sg),
        "phi": delta_phi(reference_cell, v, grads=sg),
        "K": delta_K(reference_cell, reference_solution, v, grads=sg),
    }
    for name, value in expected.items():
        np.testing.assert_allclose(found[name], value, rtol=1e-12, atol=1e-14 * np.abs(value).max(), err_msg=name)


def test_delta_K_needs_stokes_fields(reference_cell, elastic):
    sol = solve_cell_problems(reference_cell, elastic, stokes=False)
    with pytest.raises(ValueError):
        delta_K(reference_cell, sol, np.zeros((reference_cell.n_nodes, 3)))


def test_delta_B_M():
    d_c = np.arange(9.0).reshape(3, 3)
    d_b, d_m = delta_B_M(d_c, 0.0, 0.5, 2.0)
    np.testing.assert_array_equal(d_b, d_c)
    assert d_m == 0.5
    _, d_m = delta_B_M(d_c, 0.1, 0.5, 0.0)
    assert d_m == 0.5


def test_finite_differences(box, reference_cell, elastic):
    n = box.n_shape_free
    # a corner master, an interior master and two cell-size coordinates
    table = check_gradients(box, reference_cell, elastic, [0, 187, n - 9, n - 5], steps=(1e-3, 1e-4))
    fine = table[table["step"] == 1e-4]
    assert fine["relative_error"].max() < 1e-3
    coarse = table[table["step"] == 1e-3].set_index(["coordinate", "quantity"])["relative_error"]
    fine = fine.set_index(["coordinate", "quantity"])["relative_error"].reindex(coarse.index)
    # truncation error shrinks with the step wherever it dominates round-off
    truncated = coarse > 1e-5
    assert (fine[truncated] < coarse[truncated]).all()


@pytest.mark.slow
def test_finite_differences_undrained(box, reference_cell, elastic):
    table = check_gradients(box, reference_cell, elastic, [187, box.n_shape_free - 1], steps=(1e-4,), gamma=0.5, undrained=True)
    assert set(table["quantity"]) >= {"CC", "B"}
    assert table["relative_error"].max() < 1e-3


def test_solid_cell_permeability_gradient_is_zero(box, solid_cell, elastic):
    sol = solve_cell_problems(solid_cell, elastic)
    h = compute_coefficients(solid_cell, elastic, sol)
    grads = chain_gradient(box, solid_cell, elastic, sol, h)
    np.testing.assert_array_equal(grads.K, 0.0)
    np.testing.assert_allclose(grads.phi, 0.0, atol=1e-14)
