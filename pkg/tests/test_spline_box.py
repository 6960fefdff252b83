import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st
from hypothesis.extra.numpy import arrays

from biot_design.geometry.spline_box import (DesignVector, SplineBox,
                                             basis_matrix, build_box,
                                             cell_volume, design_from_free,
                                             design_velocity, evaluate_map,
                                             injectivity_constraints,
                                             map_jacobian,
                                             periodic_reduction,
                                             rotate_coefficients,
                                             verify_injectivity_by_sampling)
from biot_design.homogenization.tensors import HomCoefficients, isotropic_stiffness
from biot_design.resources.basics import InfeasibleReferenceException

N_FREE = 384


def test_default_box_layout(box):
    assert box.shape == (6, 6, 6)
    assert box.n_masters == 125
    assert box.n_shape_free == N_FREE


def test_reference_map_is_identity(box):
    t = np.random.default_rng(0).random((50, 3))
    d = DesignVector.zeros(box)
    np.testing.assert_allclose(evaluate_map(box, d, t), t, atol=1e-12)
    np.testing.assert_allclose(map_jacobian(box, d, t), np.broadcast_to(np.eye(3), (50, 3, 3)), atol=1e-12)


def test_partition_of_unity(box):
    t = np.random.default_rng(1).random((100, 3))
    np.testing.assert_allclose(basis_matrix(box, t).sum(axis=1), 1.0, atol=1e-12)


def test_reference_design_is_feasible(box):
    rows = injectivity_constraints(box)
    assert rows.is_satisfied(np.zeros(N_FREE))
    assert rows.matrix.shape == (2160, N_FREE)
    assert 3 * box.n_masters == 375
    assert len(rows.labels) == rows.matrix.shape[0]


def test_constraint_residuals_are_affine(box):
    rows = injectivity_constraints(box)
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=N_FREE), rng.normal(size=N_FREE)
    combined = rows.residual(x + y) - rows.residual(x) - rows.residual(y) + rows.residual(np.zeros(N_FREE))
    np.testing.assert_allclose(combined, 0.0, atol=1e-14)


def test_delta_above_greville_spacing():
    with pytest.raises(InfeasibleReferenceException):
        build_box(delta=0.2)


@pytest.mark.parametrize("kwargs", [{"degrees": (3, 3)}, {"segments": (0, 3, 3)}, {"delta": 0.0}])
def test_invalid_box_arguments(kwargs):
    with pytest.raises(ValueError):
        build_box(**kwargs)


def test_box_json(box):
    copy = SplineBox.from_json(box.to_json())
    assert copy.shape == box.shape
    np.testing.assert_array_equal(copy.lattice, box.lattice)


def test_theta_outside_bounds(box):
    with pytest.raises(ValueError):
        DesignVector(np.zeros((box.n_masters, 3)), np.zeros((3, 3)), np.array([0.0, 0.0, 2.0]))


def test_beta_changes_cell_volume(box):
    x = np.zeros(N_FREE)
    x[-9] = 0.1  # beta[0, 0]
    volume, cofactor = cell_volume(box, design_from_free(box, x))
    assert volume == pytest.approx(1.1)
    assert cofactor[0, 0] == pytest.approx(1.0)


def test_slave_face_follows_beta(box):
    x = np.zeros(N_FREE)
    x[-9:-6] = [0.05, 0.02, 0.0]
    t = np.array([[1.0, 0.3, 0.7], [0.0, 0.3, 0.7]])
    y = evaluate_map(box, design_from_free(box, x), t)
    np.testing.assert_allclose(y[0] - t[0], [0.05, 0.02, 0.0], atol=1e-12)
    np.testing.assert_allclose(y[1], t[1], atol=1e-12)


def test_design_velocity_of_beta(box):
    t = np.array([[1.0, 0.5, 0.5], [0.0, 0.5, 0.5]])
    v = design_velocity(box, t, N_FREE - 9)
    np.testing.assert_allclose(v, [[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]], atol=1e-12)


def test_crossed_control_points_violate_rows(box):
    alpha = np.zeros((5, 5, 5, 3))
    alpha[2, :, :, 0] = 1.5
    x = np.concatenate([alpha.ravel(), np.zeros(9)])
    assert not injectivity_constraints(box).is_satisfied(x)
    assert verify_injectivity_by_sampling(box, design_from_free(box, x), 22) <= 0.0


BOX = build_box()
ROWS = injectivity_constraints(BOX)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, N_FREE, elements=st.floats(-0.005, 0.005)))
def test_small_designs_stay_injective(x):
    assert ROWS.is_satisfied(x)
    assert verify_injectivity_by_sampling(BOX, design_from_free(BOX, x), 6) > 0.0


def test_rotation_derivative_matches_finite_differences():
    k = np.array([[1.0, 0.2, 0.0], [0.2, 0.5, 0.1], [0.0, 0.1, 0.25]])
    a = isotropic_stiffness(1.0, 0.3)
    a[0, 0] += 0.5
    h = HomCoefficients(A=a, C=0.1 * k, N=0.1, K=k, phi=0.3)
    step = 1e-6
    for theta in (np.zeros(3), np.array([0.1, 0.2, 0.3])):
        derivatives = rotate_coefficients(h, theta).derivatives
        for axis in range(3):
            e = np.zeros(3)
            e[axis] = step
            plus = rotate_coefficients(h, theta + e).coefficients
            minus = rotate_coefficients(h, theta - e).coefficients
            for name in ("A", "K"):
                fd = (getattr(plus, name) - getattr(minus, name)) / (2.0 * step)
                an = derivatives[name][axis]
                assert np.linalg.norm(fd - an) / np.linalg.norm(an) < 1e-8


def test_rotation_keeps_isotropic_tensors():
    a = isotropic_stiffness(2.0, 0.25)
    h = HomCoefficients(A=a, C=np.zeros((3, 3)), N=0.0, K=np.eye(3), phi=0.0)
    rotated = rotate_coefficients(h, np.array([0.3, 0.5, 1.1])).coefficients
    np.testing.assert_allclose(rotated.A, a, atol=1e-12)
    np.testing.assert_allclose(rotated.K, np.eye(3), atol=1e-12)


def test_corner_slave_collects_all_translations(box):
    t = periodic_reduction(box)
    assert t.shape == (3 * 216, N_FREE)
    # lattice point (5, 5, 5) copies master (0, 0, 0) and adds beta_1 + beta_2 + beta_3
    row = t[3 * 215].toarray().ravel()
    np.testing.assert_array_equal(np.flatnonzero(row), [0, 375, 378, 381])
    # lattice point (2, 2, 2) is master 62
    assert t[3 * 86 + 1].toarray().ravel()[187] == 1.0
