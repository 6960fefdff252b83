import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import BSpline

from biot_design.homogenization.tensors import (HomCoefficients,
                                                RotatedCoefficients,
                                                rotate_fourth,
                                                rotate_fourth_derivative,
                                                rotate_second,
                                                rotate_second_derivative,
                                                rotation_derivatives,
                                                rotation_matrix)
from biot_design.resources.basics import InfeasibleReferenceException
from biot_design.resources.constants import THETA_BOUNDS

logger = logging.getLogger("spline_box")

# Separating planes H_s(x) = PLANES[s] . x
PLANES = np.array(
    [[1.0, -1.0, -1.0], [1.0, -1.0, 1.0], [1.0, 1.0, -1.0], [1.0, 1.0, 1.0]]
)
# Cone signs mu[k, s] for lattice direction k
CONE_SIGNS = np.array(
    [[1.0, 1.0, 1.0, 1.0], [-1.0, -1.0, 1.0, 1.0], [-1.0, 1.0, -1.0, 1.0]]
)


def clamped_knots(degree: int, segments: int) -> np.ndarray:
    interior = np.arange(1, segments) / segments
    return np.concatenate([np.zeros(degree + 1), interior, np.ones(degree + 1)])


def greville_abscissae(knots: np.ndarray, degree: int) -> np.ndarray:
    n = len(knots) - degree - 1
    return np.array([knots[i + 1: i + degree + 1].mean() for i in range(n)])


@dataclass(frozen=True)
class SplineBox:
    degrees: Tuple[int, int, int]
    segments: Tuple[int, int, int]
    knots: Tuple[np.ndarray, np.ndarray, np.ndarray]
    lattice: np.ndarray
    delta: float

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(p + n for p, n in zip(self.degrees, self.segments))

    @property
    def n_control(self) -> int:
        return int(np.prod(self.shape))

    @property
    def n_masters(self) -> int:
        return int(np.prod([m - 1 for m in self.shape]))

    @property
    def n_shape_free(self) -> int:
        """Free coordinates of alpha-tilde and beta (theta excluded)."""
        return 3 * self.n_masters + 9

    def to_json(self) -> Dict[str, Any]:
        return {
            "degrees": list(self.degrees),
            "segments": list(self.segments),
            "knots": [k.tolist() for k in self.knots],
            "lattice": self.lattice.tolist(),
            "delta": self.delta,
        }

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> "SplineBox":
        box = cls(
            degrees=tuple(int(p) for p in data["degrees"]),
            segments=tuple(int(n) for n in data["segments"]),
            knots=tuple(np.asarray(k, dtype=float) for k in data["knots"]),
            lattice=np.asarray(data["lattice"], dtype=float),
            delta=float(data["delta"]),
        )
        if box.lattice.shape != box.shape + (3,):
            raise ValueError(f"Lattice shape {box.lattice.shape} does not match {box.shape}")
        return box


@dataclass(frozen=True)
class DesignVector:
    """
    Master control point displacements alpha (n_masters x 3), slave face translations
    beta (row k translates the slave face normal to direction k) and cell rotation theta.
    """

    alpha: np.ndarray
    beta: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        lo, hi = THETA_BOUNDS
        if theta.shape != (3,) or np.any(theta < lo - 1e-12) or np.any(theta > hi + 1e-12):
            raise ValueError(f"theta must be a 3-vector in [{lo}, {hi}], got {theta}")
        if np.asarray(self.beta).shape != (3, 3):
            raise ValueError("beta must be 3x3")

    @classmethod
    def zeros(cls, box: SplineBox) -> "DesignVector":
        return cls(np.zeros((box.n_masters, 3)), np.zeros((3, 3)), np.zeros(3))

    def free_vector(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.alpha), np.ravel(self.beta)])

    def to_json(self) -> Dict[str, Any]:
        return {
            "alpha_tilde": np.asarray(self.alpha).tolist(),
            "beta": np.asarray(self.beta).tolist(),
            "theta": np.asarray(self.theta).tolist(),
        }

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> "DesignVector":
        return cls(
            np.asarray(data["alpha_tilde"], dtype=float).reshape(-1, 3),
            np.asarray(data["beta"], dtype=float),
            np.asarray(data["theta"], dtype=float),
        )


def design_from_free(
    box: SplineBox, x: np.ndarray, theta: Optional[np.ndarray] = None
) -> DesignVector:
    x = np.asarray(x, dtype=float)
    if x.shape != (box.n_shape_free,):
        raise ValueError(f"Expected {box.n_shape_free} free coordinates, got {x.shape}")
    n = 3 * box.n_masters
    return DesignVector(
        x[:n].reshape(-1, 3),
        x[n:].reshape(3, 3),
        np.zeros(3) if theta is None else np.asarray(theta, dtype=float),
    )


@dataclass(frozen=True)
class LinearConstraintSet:
    """
    Rows matrix @ x <= rhs over the free (alpha-tilde, beta) coordinates. labels holds
    (plane s, direction k, flat lattice index i) per row, all zero based.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    labels: np.ndarray

    def residual(self, x: np.ndarray) -> np.ndarray:
        """Nonnegative entries mean satisfied rows."""
        return self.rhs - self.matrix @ x

    def is_satisfied(self, x: np.ndarray, tol: float = 0.0) -> bool:
        return bool(np.all(self.residual(x) >= -tol))


def build_box(
    degrees: Sequence[int] = (3, 3, 3), segments: Sequence[int] = (3, 3, 3), delta: float = 0.02
) -> SplineBox:
    """
    Clamped uniform B-spline box over the unit cube with control points at the
    Greville abscissae

    :param degrees: Polynomial degree per direction
    :param segments: Number of knot spans per direction
    :param delta: Injectivity margin of the cone constraints
    :return: SplineBox whose reference map is the identity
    """
    degrees = tuple(int(p) for p in degrees)
    segments = tuple(int(n) for n in segments)
    if len(degrees) != 3 or len(segments) != 3:
        raise ValueError("degrees and segments need three entries")
    if min(degrees) < 1 or min(segments) < 1:
        raise ValueError(f"degrees {degrees} and segments {segments} must be >= 1")
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")

    knots = tuple(clamped_knots(p, n) for p, n in zip(degrees, segments))
    abscissae = [greville_abscissae(k, p) for k, p in zip(knots, degrees)]
    spacing = min(np.diff(g).min() for g in abscissae)
    if delta > spacing + 1e-15:
        raise InfeasibleReferenceException(
            f"delta={delta} exceeds the minimal Greville spacing {spacing:.6g}"
        )
    g1, g2, g3 = np.meshgrid(*abscissae, indexing="ij")
    lattice = np.stack([g1, g2, g3], axis=-1)
    box = SplineBox(degrees, segments, knots, lattice, float(delta))
    logger.info(
        f"Spline box {box.shape} with {box.n_control} control points, "
        f"{3 * box.n_masters} free control coordinates"
    )
    return box


def _axis_basis(box: SplineBox, axis: int, t: np.ndarray, derivative: int = 0) -> np.ndarray:
    m = box.shape[axis]
    spline = BSpline(box.knots[axis], np.eye(m), box.degrees[axis], extrapolate=True)
    if derivative:
        spline = spline.derivative(derivative)
    return spline(np.clip(t, 0.0, 1.0))


def basis_matrix(box: SplineBox, t: np.ndarray) -> np.ndarray:
    """
    Tensor-product basis values at parameter points

    :param box: Spline box
    :param t: Parameter points, shape (n, 3) in [0, 1]^3
    :return: Array (n, n_control) in C order of the lattice index
    """
    t = np.atleast_2d(t)
    b = [_axis_basis(box, k, t[:, k]) for k in range(3)]
    return np.einsum("na,nb,nc->nabc", *b).reshape(len(t), -1)


def master_lookup(box: SplineBox) -> np.ndarray:
    """Position of each raw lattice index's master in the alpha-tilde list."""
    shape = box.shape
    idx = np.indices(shape).reshape(3, -1)
    masters = np.where(idx == (np.array(shape) - 1)[:, None], 0, idx)
    master_shape = tuple(m - 1 for m in shape)
    return np.ravel_multi_index(tuple(masters), master_shape)


def periodic_reduction(box: SplineBox) -> sp.csr_matrix:
    """
    Linear map from the free coordinates (alpha-tilde, beta) to the raw lattice
    displacements flattened as 3 * flat_index + component. A slave index on the last
    layer of direction k copies its master on the first layer and adds beta_k.
    """
    shape = box.shape
    n_raw = box.n_control
    n_alpha = 3 * box.n_masters
    idx = np.indices(shape).reshape(3, -1)
    lookup = master_lookup(box)

    rows, cols = [], []
    for d in range(3):
        rows.append(3 * np.arange(n_raw) + d)
        cols.append(3 * lookup + d)
        for k in range(3):
            slaves = np.flatnonzero(idx[k] == shape[k] - 1)
            rows.append(3 * slaves + d)
            cols.append(np.full(len(slaves), n_alpha + 3 * k + d))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    t = sp.coo_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(3 * n_raw, box.n_shape_free)
    )
    return t.tocsr()


def lattice_displacements(box: SplineBox, d: DesignVector) -> np.ndarray:
    alpha = periodic_reduction(box) @ d.free_vector()
    return alpha.reshape(box.shape + (3,))


def evaluate_map(box: SplineBox, d: DesignVector, t: np.ndarray) -> np.ndarray:
    """
    x(t) = sum_i (P_i + alpha_i) B_i(t)

    :param box: Spline box
    :param d: Design vector
    :param t: One parameter point (3,) or many (n, 3)
    :return: Mapped point(s) of the same shape as t
    """
    t = np.asarray(t, dtype=float)
    points = (box.lattice + lattice_displacements(box, d)).reshape(-1, 3)
    x = basis_matrix(box, t.reshape(-1, 3)) @ points
    return x.reshape(t.shape)


def map_jacobian(box: SplineBox, d: DesignVector, t: np.ndarray) -> np.ndarray:
    t = np.atleast_2d(np.asarray(t, dtype=float))
    points = box.lattice + lattice_displacements(box, d)
    b = [_axis_basis(box, k, t[:, k]) for k in range(3)]
    db = [_axis_basis(box, k, t[:, k], derivative=1) for k in range(3)]
    columns = [
        np.einsum("na,nb,nc,abcx->nx", db[0], b[1], b[2], points),
        np.einsum("na,nb,nc,abcx->nx", b[0], db[1], b[2], points),
        np.einsum("na,nb,nc,abcx->nx", b[0], b[1], db[2], points),
    ]
    return np.stack(columns, axis=-1)


def verify_injectivity_by_sampling(box: SplineBox, d: DesignVector, n: int) -> float:
    """
    Minimum Jacobian determinant of the spline map over an n^3 lattice of [0,1]^3

    :param box: Spline box
    :param d: Design vector
    :param n: Samples per direction
    :return: Minimum sampled determinant
    """
    if n < 1:
        raise ValueError(f"Sample count must be >= 1, got {n}")
    s = np.linspace(0.0, 1.0, n) if n > 1 else np.array([0.5])
    t = np.stack(np.meshgrid(s, s, s, indexing="ij"), axis=-1).reshape(-1, 3)
    return float(np.linalg.det(map_jacobian(box, d, t)).min())


def injectivity_constraints(box: SplineBox) -> LinearConstraintSet:
    """
    Linear cone constraints on adjacent control point differences

    For every direction k, index i with a successor i_k+ and plane s:
    -mu_sk H_s(alpha_{i_k+} - alpha_i) <= mu_sk H_s(P_{i_k+} - P_i) - delta

    :param box: Spline box
    :return: Constraints over the free (alpha-tilde, beta) coordinates
    """
    shape = box.shape
    n_raw = box.n_control
    idx = np.indices(shape).reshape(3, -1)
    flat_lattice = box.lattice.reshape(-1, 3)

    rows, cols, vals, rhs, labels = [], [], [], [], []
    row = 0
    for k in range(3):
        base = np.flatnonzero(idx[k] < shape[k] - 1)
        succ_idx = idx[:, base].copy()
        succ_idx[k] += 1
        succ = np.ravel_multi_index(tuple(succ_idx), shape)
        diff = flat_lattice[succ] - flat_lattice[base]
        for s in range(4):
            coef = -CONE_SIGNS[k, s] * PLANES[s]
            n_rows = len(base)
            row_ids = row + np.arange(n_rows)
            for c in range(3):
                rows += [row_ids, row_ids]
                cols += [3 * succ + c, 3 * base + c]
                vals += [np.full(n_rows, coef[c]), np.full(n_rows, -coef[c])]
            rhs.append(CONE_SIGNS[k, s] * diff @ PLANES[s] - box.delta)
            labels.append(np.stack([np.full(n_rows, s), np.full(n_rows, k), base], axis=1))
            row += n_rows

    raw = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(row, 3 * n_raw),
    ).tocsr()
    matrix = (raw @ periodic_reduction(box)).tocsr()
    matrix.eliminate_zeros()
    logger.info(f"{row} injectivity rows over {box.n_shape_free} free coordinates")
    return LinearConstraintSet(matrix, np.concatenate(rhs), np.concatenate(labels))


def lattice_vectors(box: SplineBox, d: DesignVector) -> np.ndarray:
    """Rows are the periodicity vectors e_k + beta_k of the deformed cell."""
    extent = box.lattice[-1, -1, -1] - box.lattice[0, 0, 0]
    return np.diag(extent) + np.asarray(d.beta)


def cell_volume(box: SplineBox, d: DesignVector) -> Tuple[float, np.ndarray]:
    """
    Volume of the deformed periodic cell and its derivative with respect to beta

    :return: (|Y|, d|Y|/d beta as 3x3)
    """
    vectors = lattice_vectors(box, d)
    volume = float(np.linalg.det(vectors))
    cofactor = volume * np.linalg.inv(vectors).T
    return volume, cofactor


def design_velocity(box: SplineBox, preimages: np.ndarray, coordinate: int) -> np.ndarray:
    """
    Nodal velocity field of one free coordinate

    :param box: Spline box
    :param preimages: Parameter preimages t(y) of the mesh nodes, shape (n_nodes, 3)
    :param coordinate: Index into the free (alpha-tilde, beta) vector
    :return: Velocity field, shape (n_nodes, 3)
    """
    if preimages is None or np.any(~np.isfinite(preimages)):
        raise ValueError("Every node needs a parameter preimage t(y)")
    column = periodic_reduction(box)[:, coordinate].toarray().ravel()
    return basis_matrix(box, preimages) @ column.reshape(-1, 3)


def velocity_matrix(box: SplineBox, preimages: np.ndarray) -> Tuple[np.ndarray, sp.csr_matrix]:
    """
    Factors (W, T) of all design velocity fields: the field of free coordinate c is
    W @ (T[:, c] reshaped to (n_control, 3)).
    """
    if preimages is None or np.any(~np.isfinite(preimages)):
        raise ValueError("Every node needs a parameter preimage t(y)")
    return basis_matrix(box, preimages), periodic_reduction(box)


def rotate_coefficients(h: HomCoefficients, theta: np.ndarray) -> RotatedCoefficients:
    """
    Rotate the tensorial coefficients by R(theta) and differentiate in theta

    :param h: Coefficients of the unrotated cell
    :param theta: Rotation angles about the x, y and z axes
    :return: Rotated coefficients and d/dtheta_k of A, B, C and K
    """
    theta = np.asarray(theta, dtype=float)
    r = rotation_matrix(theta)
    dr = rotation_derivatives(theta)
    rotated = h.with_tensors(
        A=rotate_fourth(h.A, r), C=rotate_second(h.C, r), K=rotate_second(h.K, r)
    )
    derivatives = {
        "A": np.stack([rotate_fourth_derivative(h.A, r, dr[k]) for k in range(3)]),
        "C": np.stack([rotate_second_derivative(h.C, r, dr[k]) for k in range(3)]),
        "K": np.stack([rotate_second_derivative(h.K, r, dr[k]) for k in range(3)]),
    }
    # B = C + phi I and R I R^T = I
    derivatives["B"] = derivatives["C"]
    return RotatedCoefficients(rotated, derivatives)
