import numpy as np
import pytest

from biot_design.geometry.spline_box import injectivity_constraints
from biot_design.macro.biot_darcy import (MacroCoefficients, MacroData,
                                          assemble_system, box_mesh,
                                          solve_adjoint, solve_state)
from biot_design.macro.two_scale import (TERMS, LocalDesignProblem,
                                         pad_linear_rows, term_table,
                                         two_scale_local_optimize)
from biot_design.optimization.slp import SLPOptions

ELEMENT = 151


def macro_problem(h, lam, data=None):
    mesh = box_mesh()
    system = assemble_system(mesh, MacroCoefficients.uniform(h, mesh.n_elements), data or MacroData())
    state = solve_state(system)
    return system, state, solve_adjoint(system, state, lam)


@pytest.fixture(scope="module")
def local_problem(synthetic_coefficients, box, reference_cell, elastic):
    system, state, adjoint = macro_problem(synthetic_coefficients, -100.0)
    return LocalDesignProblem(system, state, adjoint, [ELEMENT], box, reference_cell, elastic)


def test_vanishing_macro_fields(synthetic_coefficients, box, reference_cell, elastic):
    data = MacroData(pressure_1=0.0, pressure_2=0.0, traction=(0.0, 0.0, 0.0))
    system, state, adjoint = macro_problem(synthetic_coefficients, -1.0, data)
    record = two_scale_local_optimize(system, state, adjoint, [ELEMENT], box, reference_cell, elastic)
    assert record.status == "converged"
    assert record.iterations == 1
    np.testing.assert_array_equal(record.x, 0.0)


def test_reference_value(local_problem):
    ev = local_problem.evaluate(np.zeros(local_problem.n))
    assert local_problem.n == local_problem.box.n_shape_free + 1
    assert ev.objective == pytest.approx(np.sign(local_problem.initial_value))
    assert ev.report["F_e"] == pytest.approx(sum(ev.report[t] for t in TERMS))
    assert ev.eq[0] == pytest.approx(0.0, abs=1e-12)


def test_rotation_gradient(local_problem):
    step = 1e-6
    x = np.zeros(local_problem.n)
    x[-1] = 0.3
    e = np.zeros(local_problem.n)
    e[-1] = step
    fd = (local_problem.evaluate(x + e).objective - local_problem.evaluate(x - e).objective) / (2.0 * step)
    assert local_problem.evaluate(x).gradient[-1] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_shape_gradient(local_problem):
    step = 1e-4
    x = np.zeros(local_problem.n)
    for c in (187, local_problem.n_shape - 9):
        e = np.zeros(local_problem.n)
        e[c] = step
        fd = (local_problem.evaluate(x + e).objective - local_problem.evaluate(x - e).objective) / (2.0 * step)
        assert local_problem.evaluate(x).gradient[c] == pytest.approx(fd, rel=1e-3, abs=1e-6)


def test_split(local_problem):
    x = np.zeros(local_problem.n)
    x[-1] = 0.4
    shape, theta = local_problem.split(x)
    assert len(shape) == local_problem.n_shape
    np.testing.assert_array_equal(theta, [0.0, 0.0, 0.4])
    lower, upper = local_problem.bounds()
    assert lower[-1] == 0.0 and upper[-1] == pytest.approx(np.pi / 2.0)
    assert np.isinf(lower[:-1]).all()


def test_padded_rows(box):
    rows = injectivity_constraints(box)
    padded = pad_linear_rows(rows, 2)
    assert padded.matrix.shape == (rows.matrix.shape[0], box.n_shape_free + 2)
    x = np.concatenate([np.zeros(box.n_shape_free), [1.0, -3.0]])
    np.testing.assert_array_equal(padded.residual(x), rows.residual(np.zeros(box.n_shape_free)))


@pytest.mark.parametrize("axes", [(3,), (2, 2)])
def test_invalid_rotation_axes(synthetic_coefficients, box, reference_cell, elastic, axes):
    system, state, adjoint = macro_problem(synthetic_coefficients, -1.0)
    with pytest.raises(ValueError):
        LocalDesignProblem(system, state, adjoint, [ELEMENT], box, reference_cell, elastic, theta_axes=axes)


@pytest.mark.slow
def test_short_local_run(synthetic_coefficients, box, reference_cell, elastic):
    system, state, adjoint = macro_problem(synthetic_coefficients, -100.0)
    record = two_scale_local_optimize(
        system, state, adjoint, [ELEMENT], box, reference_cell, elastic, options=SLPOptions(max_iter=2)
    )
    assert np.all(np.diff(record.history["merit"].to_numpy()) <= 1e-12)
    assert record.history["objective"].iloc[0] == pytest.approx(record.history["F_e"].iloc[0])
    summary = record.summary()
    assert summary["initial_objective"] == pytest.approx(record.initial.report["F_e"])
    assert summary["objective"] == pytest.approx(record.evaluation.report["F_e"])
    table = term_table(record, ELEMENT, -100.0)
    assert list(table.columns[:2]) == ["element", "lam"]
    assert set(TERMS) <= set(table.columns)
    assert (table["element"] == ELEMENT).all()
