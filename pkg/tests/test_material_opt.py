import numpy as np
import pytest

from biot_design.geometry.spline_box import injectivity_constraints
from biot_design.homogenization.tensors import HomCoefficients
from biot_design.optimization.material_opt import (DesignCriteria,
                                                   MaterialProblem,
                                                   assemble_nlp,
                                                   check_bound_pattern,
                                                   eval_objectives,
                                                   optimize_material,
                                                   resolve_bounds)
from biot_design.optimization.slp import SLPOptions
from biot_design.resources.basics import ConfigException
from biot_design.resources.constants import KAPPA0, PROBLEM_KINDS


@pytest.mark.parametrize("kind", PROBLEM_KINDS)
def test_default_criteria_match_their_kind(kind):
    crit = DesignCriteria.for_kind(kind)
    check_bound_pattern(kind, crit)
    assert crit.volume_flag == int(kind in ("SP-bis", "PS-bis"))


def test_default_bounds():
    assert DesignCriteria.for_kind("SP").kappa0 == KAPPA0
    spx = DesignCriteria.for_kind("SPX")
    assert spx.kappa1 == KAPPA0
    np.testing.assert_allclose(spx.beta, [4.0 / 9.0, 4.0 / 9.0, 1.0 / 9.0])
    psx = DesignCriteria.for_kind("PSX'")
    assert psx.s0 == 0.9 and psx.s1 == 0.95
    np.testing.assert_allclose(psx.gamma.sum(), 1.0)
    cs = DesignCriteria.for_kind("CS")
    assert cs.s0 == 1.0 and cs.relative_bounds


def test_unknown_kind():
    with pytest.raises(ConfigException, match="problem.kind"):
        DesignCriteria.for_kind("SQ")


@pytest.mark.parametrize(
    "kind, overrides, key",
    [
        ("SPX", {"kappa0": 1e-5}, "problem.kappa0"),
        ("SP", {"kappa0": -np.inf}, "problem.kappa0"),
        ("PS", {"s1": 0.5}, "problem.s1"),
        ("PSX'", {"s1": -np.inf}, "problem.s0, problem.s1"),
        ("SP", {"volume_flag": 1}, "problem.volume_flag"),
        ("CS", {"kappa0": 1e-5}, "problem.kappa0/kappa1"),
    ],
)
def test_bound_pattern_errors(kind, overrides, key):
    with pytest.raises(ConfigException, match=key):
        check_bound_pattern(kind, DesignCriteria.for_kind(kind, **overrides))


def test_invalid_criteria():
    with pytest.raises(ValueError):
        DesignCriteria(strain_modes=np.zeros((3, 3, 3)))
    with pytest.raises(ValueError):
        DesignCriteria(directions=np.ones((3, 3)))
    with pytest.raises(ValueError):
        DesignCriteria(volume_flag=2)


def test_objectives_of_synthetic_coefficients(synthetic_coefficients):
    h = synthetic_coefficients
    values = eval_objectives(h, DesignCriteria())
    np.testing.assert_allclose(values["Phi_e_k"], np.diag(h.A)[:3], rtol=1e-12)
    np.testing.assert_allclose(values["Psi_k"], np.diag(h.K), rtol=1e-12)
    assert values["Psi"] == pytest.approx(np.trace(h.K) / 3.0)
    assert values["Phi_sigma"] > 0.0


def test_undrained_objective_needs_a_coupling(synthetic_coefficients):
    h = HomCoefficients(A=synthetic_coefficients.A, C=np.zeros((3, 3)), N=0.0, K=np.eye(3), phi=0.0)
    assert eval_objectives(h, DesignCriteria())["Phi_sigma"] is None


def test_relative_bounds(synthetic_coefficients):
    h = synthetic_coefficients
    values = eval_objectives(h, DesignCriteria())
    ps = resolve_bounds(DesignCriteria.for_kind("PS"), h, "PS")
    assert ps.s0 == pytest.approx(0.9 * values["Phi_e_k"].min())
    assert not ps.relative_bounds
    cs = resolve_bounds(DesignCriteria.for_kind("CS"), h, "CS")
    assert cs.s0 == pytest.approx(values["Phi_e"])
    sp = DesignCriteria.for_kind("SP")
    assert resolve_bounds(sp, h, "SP") is sp


def test_problem_layout(box, reference_cell, elastic):
    nlp, problem = assemble_nlp("SP-bis", DesignCriteria.for_kind("SP-bis"), box, reference_cell, elastic)
    assert nlp.n == box.n_shape_free
    assert nlp.ineq_labels == ["kappa0_1", "kappa0_2", "kappa0_3"]
    assert nlp.eq_labels == ["volume", "pore_volume"]
    ev = problem.evaluate(np.zeros(nlp.n))
    assert ev.objective == pytest.approx(-1.0)
    assert ev.ineq_jacobian.shape == (3, nlp.n)
    assert ev.eq_jacobian.shape == (2, nlp.n)
    np.testing.assert_allclose(ev.eq, 0.0, atol=1e-12)


def test_compliance_problem_starts_on_its_caps(box, reference_cell, elastic):
    problem = MaterialProblem("CS", DesignCriteria.for_kind("CS"), box, reference_cell, elastic)
    ev = problem.evaluate(np.zeros(box.n_shape_free))
    assert ev.objective == pytest.approx(1.0)
    # cubic symmetry puts every axial stiffness on the weighted mean
    np.testing.assert_allclose(ev.ineq, 0.0, atol=1e-6)


def test_objective_gradient(box, reference_cell, elastic):
    problem = MaterialProblem("SP", DesignCriteria.for_kind("SP"), box, reference_cell, elastic)
    step = 1e-4
    for c in (187, box.n_shape_free - 9):
        e = np.zeros(box.n_shape_free)
        e[c] = step
        fd = (problem.evaluate(e).objective - problem.evaluate(-e).objective) / (2.0 * step)
        analytic = problem.evaluate(np.zeros(box.n_shape_free)).gradient[c]
        assert analytic == pytest.approx(fd, rel=1e-3, abs=1e-6)


@pytest.mark.slow
def test_short_stiffness_run(box, reference_cell, elastic, tmp_path):
    options = SLPOptions(max_iter=3)
    record = optimize_material(
        "SP", DesignCriteria.for_kind("SP"), box, reference_cell, elastic, options=options,
        snapshot_dir=str(tmp_path), sampling_points=6,
    )
    merit = record.history["merit"].to_numpy()
    assert np.all(np.diff(merit) <= 1e-12)
    assert record.history["objective"].iloc[0] == pytest.approx(record.initial.report["Phi_e"])
    summary = record.summary()
    assert summary["initial_objective"] == pytest.approx(record.initial.report["Phi_e"])
    assert summary["objective"] == pytest.approx(record.evaluation.report["Phi_e"])
    assert injectivity_constraints(box).is_satisfied(record.x, tol=1e-9)
    assert isinstance(record.coefficients, HomCoefficients)
    if record.history["accepted"].iloc[1:].any():
        assert list((tmp_path / "snapshots").glob("cell_*.vtk"))
