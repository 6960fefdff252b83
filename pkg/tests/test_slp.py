import numpy as np
import pandas as pd
import pytest
import scipy.sparse as sp

from biot_design.geometry.spline_box import LinearConstraintSet
from biot_design.optimization.slp import (NLP, Evaluation, SLPOptions,
                                          _scale_back, merit, solve_nlp,
                                          write_history)
from biot_design.resources.basics import (InfeasibleStartException,
                                          SolverException)


def upper_row(bound: float) -> LinearConstraintSet:
    return LinearConstraintSet(sp.csr_matrix([[1.0]]), np.array([bound]), np.zeros((1, 3), dtype=int))


def parabola(x):
    return Evaluation(objective=float((x[0] - 2.0) ** 2), gradient=np.array([2.0 * (x[0] - 2.0)]))


def circle(x):
    return Evaluation(
        objective=float(x.sum()),
        gradient=np.ones(2),
        eq=np.array([x @ x - 2.0]),
        eq_jacobian=2.0 * x[None, :],
        report={"radius": float(np.sqrt(x @ x))},
    )


WIDE = SLPOptions(move_limit=0.5, max_move_limit=1.0, max_iter=200)


def test_linear_row_becomes_active():
    record = solve_nlp(NLP(parabola, 1, linear=upper_row(1.0)), np.zeros(1), WIDE)
    assert record.status == "converged"
    assert record.x[0] == pytest.approx(1.0, abs=1e-9)
    assert record.feasible


def test_equality_constrained_minimum():
    record = solve_nlp(NLP(circle, 2, eq_labels=["circle"]), np.array([-0.2, -1.5]), WIDE)
    np.testing.assert_allclose(record.x, [-1.0, -1.0], atol=1e-3)
    assert record.evaluation.max_violation < 1e-4
    assert "radius" in record.history.columns


def test_merit_never_increases():
    record = solve_nlp(NLP(circle, 2), np.array([-0.2, -1.5]), WIDE)
    assert np.all(np.diff(record.history["merit"].to_numpy()) <= 1e-12)
    assert record.history["merit"].iloc[0] == pytest.approx(merit(record.initial, WIDE.penalty))


def test_iteration_limit_keeps_best_feasible_point():
    options = SLPOptions(move_limit=0.5, max_move_limit=1.0, max_iter=1)
    record = solve_nlp(NLP(parabola, 1, linear=upper_row(1.0)), np.zeros(1), options)
    assert record.status == "max_iter"
    assert not record.converged
    assert record.iterations == 1
    assert record.x[0] == pytest.approx(0.5)


def test_infeasible_start():
    with pytest.raises(InfeasibleStartException):
        solve_nlp(NLP(parabola, 1, linear=upper_row(1.0)), np.array([2.0]))
    with pytest.raises(InfeasibleStartException):
        solve_nlp(NLP(parabola, 1, lower=np.zeros(1)), np.array([-1.0]))


def test_failed_trial_points_shrink_the_radius():
    def fragile(x):
        if x[0] > 0.3:
            raise SolverException("degenerate trial point")
        return Evaluation(objective=-float(x[0]), gradient=np.array([-1.0]))

    options = SLPOptions(move_limit=0.5, max_move_limit=1.0, max_iter=10)
    record = solve_nlp(NLP(fragile, 1, lower=np.zeros(1), upper=np.ones(1)), np.zeros(1), options)
    assert 0.0 < record.x[0] <= 0.3
    assert not record.history["accepted"].all()


def test_scale_back():
    row = upper_row(1.0)
    assert _scale_back(row, np.array([0.5]), np.array([1.0])) == pytest.approx(0.5)
    assert _scale_back(row, np.array([0.5]), np.array([-1.0])) == 1.0
    assert _scale_back(None, np.array([0.5]), np.array([1.0])) == 1.0


@pytest.mark.parametrize(
    "kwargs",
    [
        {"move_limit": 0.1, "max_move_limit": 0.05},
        {"min_move_limit": 0.0},
        {"penalty": 0.0},
        {"max_iter": 0},
        {"accept_ratio": 0.5, "shrink_ratio": 0.25},
    ],
)
def test_invalid_options(kwargs):
    with pytest.raises(ValueError):
        SLPOptions(**kwargs)


def test_violation():
    ev = Evaluation(0.0, np.zeros(1), ineq=np.array([0.5, -1.0]), eq=np.array([-0.2]))
    assert ev.violation == pytest.approx(0.7)
    assert ev.max_violation == pytest.approx(0.5)
    assert Evaluation(0.0, np.zeros(1)).max_violation == 0.0


def test_history_file(tmp_path):
    record = solve_nlp(NLP(parabola, 1, linear=upper_row(1.0)), np.zeros(1), WIDE)
    path = tmp_path / "history.csv"
    write_history(record, str(path))
    history = pd.read_csv(path)
    assert {"iteration", "objective", "merit", "trust_radius", "accepted"} <= set(history.columns)
    assert len(history) == len(record.history)
    summary = record.summary()
    assert summary["status"] == "converged"
    assert summary["initial_objective"] == pytest.approx(4.0)


def test_summary_reports_problem_units():
    record = solve_nlp(NLP(parabola, 1, linear=upper_row(1.0)), np.zeros(1), WIDE)
    record.objective_scale = -2.0
    summary = record.summary()
    assert summary["initial_objective"] == pytest.approx(-8.0)
    assert summary["objective"] == pytest.approx(-2.0 * record.evaluation.objective)
