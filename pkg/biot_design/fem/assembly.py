"""Vectorised element kernels on trilinear cells and COO assembly."""
from typing import Optional

import numpy as np
import scipy.sparse as sp

from biot_design.fem.hexahedra import ElementGeometry
from biot_design.homogenization.tensors import stress_to_voigt


def vector_dofs(nodes: np.ndarray) -> np.ndarray:
    """Interleaved vector DOFs 3 * node + component, shape (E, 3 n)."""
    return (3 * nodes[:, :, None] + np.arange(3)).reshape(len(nodes), -1)


def strain_matrix(gradients: np.ndarray) -> np.ndarray:
    """
    Engineering Voigt strain-displacement matrices

    :param gradients: Physical shape gradients, shape (E, Q, n, 3)
    :return: B with shape (E, Q, 6, 3 n) for interleaved DOFs
    """
    e, q, n, _ = gradients.shape
    b = np.zeros((e, q, 6, n, 3))
    gx, gy, gz = gradients[..., 0], gradients[..., 1], gradients[..., 2]
    b[:, :, 0, :, 0] = gx
    b[:, :, 1, :, 1] = gy
    b[:, :, 2, :, 2] = gz
    b[:, :, 3, :, 1] = gz
    b[:, :, 3, :, 2] = gy
    b[:, :, 4, :, 0] = gz
    b[:, :, 4, :, 2] = gx
    b[:, :, 5, :, 0] = gy
    b[:, :, 5, :, 1] = gx
    return b.reshape(e, q, 6, 3 * n)


def elasticity_stiffness(geom: ElementGeometry, d: np.ndarray) -> np.ndarray:
    """Element stiffness matrices for Voigt stiffness d of shape (6, 6) or (E, 6, 6)."""
    b = strain_matrix(geom.gradients)
    d = np.broadcast_to(d, (b.shape[0], 6, 6))
    return np.einsum("eqia,eij,eqjb,eq->eab", b, d, b, geom.dx, optimize=True)


def strain_load(geom: ElementGeometry, d: np.ndarray, strain: np.ndarray) -> np.ndarray:
    """Element vectors of int B^T d strain for a constant engineering strain."""
    b = strain_matrix(geom.gradients)
    stress = np.broadcast_to(d, (b.shape[0], 6, 6)) @ strain
    return np.einsum("eqia,ei,eq->ea", b, stress, geom.dx, optimize=True)


def scalar_stiffness(geom: ElementGeometry, k: Optional[np.ndarray] = None) -> np.ndarray:
    """int grad N_a . k grad N_b with k of shape (3, 3) or (E, 3, 3); identity if None."""
    g = geom.gradients
    if k is None:
        return np.einsum("eqai,eqbi,eq->eab", g, g, geom.dx, optimize=True)
    k = np.broadcast_to(k, (g.shape[0], 3, 3))
    return np.einsum("eqai,eij,eqbj,eq->eab", g, k, g, geom.dx, optimize=True)


def coupling_matrix(geom: ElementGeometry, b: np.ndarray) -> np.ndarray:
    """
    int N_p (b : e(v)) for vector test functions v and scalar trial N_p on the same cell

    :param geom: Q1 geometry shared by both fields
    :param b: Coupling tensor per element, shape (E, 3, 3)
    :return: (E, 3 n, n) element blocks
    """
    bm = strain_matrix(geom.gradients)
    bv = stress_to_voigt(b)
    return np.einsum("eqia,ei,qp,eq->eap", bm, bv, geom.shape, geom.dx, optimize=True)


def assemble(rows: np.ndarray, cols: np.ndarray, blocks: np.ndarray, shape) -> sp.csr_matrix:
    """
    Sum element blocks into a sparse matrix; negative row/col ids are dropped

    :param rows: Global row ids per element, shape (E, r)
    :param cols: Global column ids per element, shape (E, c)
    :param blocks: Element blocks, shape (E, r, c)
    :param shape: Global matrix shape
    :return: CSR matrix
    """
    r = np.broadcast_to(rows[:, :, None], blocks.shape).ravel()
    c = np.broadcast_to(cols[:, None, :], blocks.shape).ravel()
    v = blocks.ravel()
    keep = (r >= 0) & (c >= 0)
    return sp.coo_matrix((v[keep], (r[keep], c[keep])), shape=shape).tocsr()


def assemble_vector(rows: np.ndarray, values: np.ndarray, size: int) -> np.ndarray:
    r = rows.ravel()
    v = values.ravel()
    keep = r >= 0
    return np.bincount(r[keep], weights=v[keep], minlength=size)
