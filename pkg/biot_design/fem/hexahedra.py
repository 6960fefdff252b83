"""
Reference hexahedra on [-1, 1]^3: trilinear (8-node, VTK corner order) and
triquadratic (27-node, tensor order) Lagrange elements, Gauss rules and geometric maps
of trilinear cells.
"""
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Tuple

import numpy as np

HEX_CORNERS = np.array(
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]]
)
REF_CORNERS = 2.0 * HEX_CORNERS - 1.0

# face f = 2 * axis + side lies on xi_axis = -1 (side 0) or +1 (side 1)
FACE_CORNERS = np.array(
    [np.flatnonzero(HEX_CORNERS[:, f // 2] == f % 2) for f in range(6)]
)

Q2_NODES = np.indices((3, 3, 3)).reshape(3, -1).T


@lru_cache(maxsize=None)
def gauss_rule(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Tensor Gauss-Legendre rule on the reference cube

    :param n: Points per direction
    :return: points (n^3, 3) and weights (n^3,)
    """
    x, w = np.polynomial.legendre.leggauss(n)
    points = np.stack(np.meshgrid(x, x, x, indexing="ij"), axis=-1).reshape(-1, 3)
    weights = np.einsum("a,b,c->abc", w, w, w).ravel()
    return points, weights


def face_rule(face: int, n: int = 2) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gauss rule on one reference face plus its outward reference normal."""
    x, w = np.polynomial.legendre.leggauss(n)
    axis, side = divmod(face, 2)
    a, b = np.meshgrid(x, x, indexing="ij")
    others = [d for d in range(3) if d != axis]
    points = np.zeros((n * n, 3))
    points[:, others[0]] = a.ravel()
    points[:, others[1]] = b.ravel()
    points[:, axis] = 2.0 * side - 1.0
    normal = np.zeros(3)
    normal[axis] = 2.0 * side - 1.0
    return points, np.outer(w, w).ravel(), normal


def q1_shape(points: np.ndarray) -> np.ndarray:
    return np.prod(1.0 + points[:, None, :] * REF_CORNERS[None, :, :], axis=-1) / 8.0


def q1_gradients(points: np.ndarray) -> np.ndarray:
    factors = 1.0 + points[:, None, :] * REF_CORNERS[None, :, :]
    grads = np.empty(factors.shape)
    for d in range(3):
        others = [o for o in range(3) if o != d]
        grads[..., d] = REF_CORNERS[None, :, d] * factors[..., others[0]] * factors[..., others[1]]
    return grads / 8.0


def _lagrange2(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    values = np.stack([0.5 * x * (x - 1.0), 1.0 - x * x, 0.5 * x * (x + 1.0)], axis=-1)
    derivs = np.stack([x - 0.5, -2.0 * x, x + 0.5], axis=-1)
    return values, derivs


def q2_shape(points: np.ndarray) -> np.ndarray:
    v = [_lagrange2(points[:, d])[0] for d in range(3)]
    return v[0][:, Q2_NODES[:, 0]] * v[1][:, Q2_NODES[:, 1]] * v[2][:, Q2_NODES[:, 2]]


def q2_gradients(points: np.ndarray) -> np.ndarray:
    vd = [_lagrange2(points[:, d]) for d in range(3)]
    v = [p[0][:, Q2_NODES[:, d]] for d, p in enumerate(vd)]
    dv = [p[1][:, Q2_NODES[:, d]] for d, p in enumerate(vd)]
    return np.stack([dv[0] * v[1] * v[2], v[0] * dv[1] * v[2], v[0] * v[1] * dv[2]], axis=-1)


def q2_node_corners() -> List[np.ndarray]:
    """
    Corners spanning the entity of each Q2 node: one corner for a vertex node, two for
    an edge midpoint, four for a face center and eight for the cell center.
    """
    corners = []
    for node in Q2_NODES:
        mask = np.ones(8, dtype=bool)
        for d in range(3):
            if node[d] == 0:
                mask &= HEX_CORNERS[:, d] == 0
            elif node[d] == 2:
                mask &= HEX_CORNERS[:, d] == 1
        corners.append(np.flatnonzero(mask))
    return corners


def jacobians(coords: np.ndarray, ref_gradients: np.ndarray) -> np.ndarray:
    """J[e, q, i, j] = d x_i / d xi_j of trilinear cells with corner coordinates (E, 8, 3)."""
    return np.einsum("eai,qaj->eqij", coords, ref_gradients)


@dataclass(frozen=True)
class ElementGeometry:
    """Quadrature data of trilinear cells for one reference basis."""

    shape: np.ndarray  # (Q, n)
    gradients: np.ndarray  # (E, Q, n, 3)
    det: np.ndarray  # (E, Q)
    weights: np.ndarray  # (Q,)

    @property
    def dx(self) -> np.ndarray:
        return self.det * self.weights[None, :]


def element_geometry(coords: np.ndarray, order: int = 2, basis: str = "q1") -> ElementGeometry:
    """
    Shape functions, physical gradients and Jacobian determinants at Gauss points

    :param coords: Corner coordinates, shape (E, 8, 3)
    :param order: Gauss points per direction
    :param basis: "q1" or "q2" for the interpolated field; geometry is always trilinear
    :return: ElementGeometry
    """
    points, weights = gauss_rule(order)
    j = jacobians(coords, q1_gradients(points))
    det = np.linalg.det(j)
    inv = np.linalg.inv(j)
    if basis == "q1":
        shape, ref = q1_shape(points), q1_gradients(points)
    elif basis == "q2":
        shape, ref = q2_shape(points), q2_gradients(points)
    else:
        raise ValueError(f"Unknown basis {basis}")
    gradients = np.einsum("qaj,eqji->eqai", ref, inv)
    return ElementGeometry(shape, gradients, det, weights)


def corner_jacobians(coords: np.ndarray) -> np.ndarray:
    """Jacobian determinants at the eight corners of every cell, shape (E, 8)."""
    j = jacobians(coords, q1_gradients(REF_CORNERS))
    return np.linalg.det(j)


def face_geometry(coords: np.ndarray, faces: np.ndarray, n: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    """
    Shape values and weighted area vectors det(J) J^-T N_ref w on cell faces

    :param coords: Corner coordinates of the owning cells, shape (F, 8, 3)
    :param faces: Local face id per cell, shape (F,)
    :param n: Gauss points per face direction
    :return: shape values (F, n^2, 8) and outward area vectors (F, n^2, 3)
    """
    n_faces = len(faces)
    shape = np.zeros((n_faces, n * n, 8))
    area = np.zeros((n_faces, n * n, 3))
    for f in range(6):
        sel = np.flatnonzero(faces == f)
        if len(sel) == 0:
            continue
        points, weights, normal = face_rule(f, n)
        j = jacobians(coords[sel], q1_gradients(points))
        cof = np.linalg.det(j)[..., None, None] * np.swapaxes(np.linalg.inv(j), -1, -2)
        shape[sel] = q1_shape(points)[None]
        area[sel] = (cof @ normal) * weights[None, :, None]
    return shape, area


def face_gradients(coords: np.ndarray, faces: np.ndarray, n: int = 2) -> np.ndarray:
    """Physical Q1 gradients at the face Gauss points of face_geometry, shape (F, n^2, 8, 3)."""
    grads = np.zeros((len(faces), n * n, 8, 3))
    for f in range(6):
        sel = np.flatnonzero(faces == f)
        if len(sel) == 0:
            continue
        points, _, _ = face_rule(f, n)
        ref = q1_gradients(points)
        inv = np.linalg.inv(jacobians(coords[sel], ref))
        grads[sel] = np.einsum("qaj,eqji->eqai", ref, inv)
    return grads
