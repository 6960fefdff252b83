"""
Shape derivatives of the homogenized coefficients.

Every derivative is linear in the velocity gradient G = grad V, so each coefficient
entry X has a nodal shape gradient R_X with delta X(V) = sum_nodes V . R_X. The kernels
below build R_X from integrands T : G; the normalization by |Y| contributes -X div V.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sp

from biot_design.fem.cell_problems import (CellSolution, ElasticityTensor,
                                           solve_cell_problems)
from biot_design.fem.hexahedra import element_geometry
from biot_design.geometry.cell_mesh import CellMesh, mesh_volumes, morph
from biot_design.geometry.spline_box import (DesignVector, SplineBox,
                                             design_from_free,
                                             rotate_coefficients,
                                             velocity_matrix)
from biot_design.homogenization.coefficients import (UNIT_STRAINS,
                                                     compute_coefficients,
                                                     fluid_fields,
                                                     solid_fields,
                                                     undrained_constants)
from biot_design.homogenization.tensors import (VOIGT_INDEX, HomCoefficients,
                                                from_mandel,
                                                rotate_fourth, rotate_second,
                                                rotation_matrix, sym_to_mandel,
                                                to_mandel)
from biot_design.resources.basics import DomainException

logger = logging.getLogger("sensitivity")

EYE = np.eye(3)


@dataclass(frozen=True)
class ShapeGradients:
    """Nodal shape gradients, trailing axes (n_nodes, 3)."""

    A: np.ndarray  # (6, 6, n, 3)
    C: np.ndarray  # (3, 3, n, 3)
    N: np.ndarray  # (n, 3)
    phi: np.ndarray
    volume: np.ndarray
    fluid_volume: np.ndarray
    K: Optional[np.ndarray] = None  # (3, 3, n, 3)


@dataclass(frozen=True)
class CoefficientGradients:
    """Derivatives per free design coordinate (leading axis)."""

    A: np.ndarray
    C: np.ndarray
    B: np.ndarray
    N: np.ndarray
    M: np.ndarray
    phi: np.ndarray
    K: np.ndarray
    volume: np.ndarray
    fluid_volume: np.ndarray
    CC: Optional[np.ndarray] = None
    K_bulk: Optional[np.ndarray] = None
    theta: Optional[Dict[str, np.ndarray]] = None

    def to_json(self) -> Dict:
        out = {
            k: getattr(self, k).tolist()
            for k in ("A", "C", "B", "N", "M", "phi", "K", "volume", "fluid_volume")
        }
        if self.CC is not None:
            out["CC"] = self.CC.tolist()
            out["K_bulk"] = self.K_bulk.tolist()
        if self.theta is not None:
            out["theta"] = {k: v.tolist() for k, v in self.theta.items()}
        return out


def _scatter(mesh: CellMesh, elements: np.ndarray, local: np.ndarray) -> np.ndarray:
    """
    Sum element contributions (..., E, 8, 3) into nodal vectors (..., n_nodes, 3).
    """
    hexes = mesh.hexes[elements]
    rows = (3 * hexes[:, :, None] + np.arange(3)).ravel()
    scatter = sp.csr_matrix(
        (np.ones(rows.size), (rows, np.arange(rows.size))), shape=(3 * mesh.n_nodes, rows.size)
    )
    lead = local.shape[:-3]
    flat = local.reshape(-1, rows.size)
    return (scatter @ flat.T).T.reshape(lead + (mesh.n_nodes, 3))


def _volume_gradient(mesh: CellMesh, elements: np.ndarray) -> np.ndarray:
    geom = element_geometry(mesh.element_coords(elements))
    local = np.einsum("eqar,eq->ear", geom.gradients, geom.dx)
    return _scatter(mesh, elements, local)


def _bilinear_terms(gx, sx, gy, sy, grads, dx, labels: str):
    """
    Nodal integrand of the shape derivative of int sigma(x) : y, i.e. the kernel
    T = (sigma(x) : y) I - x^T sigma(y) - y^T sigma(x), contracted with grad N.
    labels are the einsum labels of the leading batch axes of x and y, e.g. "IJ".
    """
    lx, ly = labels[0], labels[1]
    s = np.einsum(f"{lx}eqkl,{ly}eqkl->{lx}{ly}eq", sx, gy, optimize=True)
    out = np.einsum(f"{lx}{ly}eq,eqar,eq->{lx}{ly}ear", s, grads, dx, optimize=True)
    wy = np.einsum(f"{ly}eqkl,eqal->{ly}eqak", sy, grads, optimize=True)
    wx = np.einsum(f"{lx}eqkl,eqal->{lx}eqak", sx, grads, optimize=True)
    out -= np.einsum(f"{lx}eqkr,{ly}eqak,eq->{lx}{ly}ear", gx, wy, dx, optimize=True)
    out -= np.einsum(f"{ly}eqkr,{lx}eqak,eq->{lx}{ly}ear", gy, wx, dx, optimize=True)
    return out


def _divergence_terms(gv, grads, dx, lead: str):
    """Nodal integrand of the shape derivative of int div v: T = div(v) I - grad(v)^T."""
    div = np.trace(gv, axis1=-2, axis2=-1)
    out = np.einsum(f"{lead}eq,eqar,eq->{lead}ear", div, grads, dx, optimize=True)
    out -= np.einsum(f"{lead}eqlr,eqal,eq->{lead}ear", gv, grads, dx, optimize=True)
    return out


def _solid_gradients(mesh: CellMesh, d: ElasticityTensor, sol: CellSolution, volume: float, r_volume):
    sf = solid_fields(mesh, d, sol)
    grads, dx = sf.geom.gradients, sf.geom.dx
    gt, st = sf.grad_total, sf.stress_total
    gp, spp = sf.grad_p[None], sf.stress_p[None]

    # A_IJ
    local = _bilinear_terms(gt, st, gt, st, grads, dx, "IJ")
    w = np.einsum("Jeqkl,eqal->Jeqak", st, grads, optimize=True)
    pi_terms = np.einsum("Irm,Jeqam,eq->IJear", UNIT_STRAINS, w, dx, optimize=True)
    local += pi_terms + np.swapaxes(pi_terms, 0, 1)
    a_value = np.einsum("Ieqij,Jeqij,eq->IJ", st, gt, dx) / volume
    r_a = _scatter(mesh, sf.elements, local) / volume
    r_a -= a_value[:, :, None, None] * r_volume / volume

    # C_I
    local = _bilinear_terms(gp, spp, gt, st, grads, dx, "PI")[0]
    wp = np.einsum("eqkl,eqal->eqak", sf.stress_p, grads, optimize=True)
    local += np.einsum("Irm,eqam,eq->Iear", UNIT_STRAINS, wp, dx, optimize=True)
    local -= _divergence_terms(sf.grad_omega, grads, dx, "I")
    div = np.trace(sf.grad_omega, axis1=-2, axis2=-1)
    c_value = -np.einsum("Ieq,eq->I", div, dx) / volume
    r_c = _scatter(mesh, sf.elements, local) / volume
    r_c -= c_value[:, None, None] * r_volume / volume
    r_c = r_c[VOIGT_INDEX]

    # N
    local = 2.0 * _divergence_terms(gp, grads, dx, "P")[0]
    local -= _bilinear_terms(gp, spp, gp, spp, grads, dx, "PQ")[0, 0]
    n_value = float(np.einsum("eqij,eqij,eq->", sf.stress_p, sf.grad_p, dx)) / volume
    r_n = _scatter(mesh, sf.elements, local) / volume - n_value * r_volume / volume
    return r_a, r_c, r_n


def _fluid_gradients(mesh: CellMesh, sol: CellSolution, volume: float, r_volume):
    ff = fluid_fields(mesh, sol)
    grads, dx = ff.geom1.gradients, ff.geom2.dx
    p, gpsi, psi = ff.pi, ff.grad_psi, ff.psi
    div = np.trace(gpsi, axis1=-2, axis2=-1)

    s = np.einsum("jeqi->ijeq", psi) + np.einsum("ieqj->ijeq", psi)
    s -= np.einsum("ieqab,jeqab->ijeq", gpsi, gpsi, optimize=True)
    s += np.einsum("ieq,jeq->ijeq", p, div) + np.einsum("jeq,ieq->ijeq", p, div)
    k_value = np.einsum("ijeq,eq->ij", s, dx) / volume

    local = np.einsum("ijeq,eqar,eq->ijear", s, grads, dx, optimize=True)
    z = np.einsum("jeqkl,eqal->jeqak", gpsi, grads, optimize=True)
    cross = np.einsum("ieqkr,jeqak,eq->ijear", gpsi, z, dx, optimize=True)
    local += cross + np.swapaxes(cross, 0, 1)
    y = np.einsum("jeqlr,eqal->jeqar", gpsi, grads, optimize=True)
    press = np.einsum("ieq,jeqar,eq->ijear", p, y, dx, optimize=True)
    local -= press + np.swapaxes(press, 0, 1)
    r_k = _scatter(mesh, ff.elements, local) / volume
    r_k -= k_value[:, :, None, None] * r_volume / volume
    return 0.5 * (r_k + np.swapaxes(r_k, 0, 1))


def shape_gradients(mesh: CellMesh, d: ElasticityTensor, sol: CellSolution) -> ShapeGradients:
    """
    Nodal shape gradients of A, C, N, phi, K and of the cell and pore volumes

    :param mesh: Cell mesh
    :param d: Solid elasticity
    :param sol: Cell problem solutions on mesh
    :return: ShapeGradients
    """
    volume, _, fluid_volume = mesh_volumes(mesh)
    r_volume = _volume_gradient(mesh, np.arange(mesh.n_elements))
    r_fluid = _volume_gradient(mesh, mesh.fluid_elements)
    r_a, r_c, r_n = _solid_gradients(mesh, d, sol, volume, r_volume)
    r_phi = r_fluid / volume - (fluid_volume / volume) * r_volume / volume
    r_k = _fluid_gradients(mesh, sol, volume, r_volume) if sol.has_stokes else None
    return ShapeGradients(r_a, r_c, r_n, r_phi, r_volume, r_fluid, r_k)


def _contract(r: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...nr,nr->...", r, v)


def delta_K(
    mesh: CellMesh, sol: CellSolution, v: np.ndarray, grads: Optional[ShapeGradients] = None
) -> np.ndarray:
    """
    Shape derivative of the permeability for a nodal velocity field

    :param mesh: Cell mesh
    :param sol: Cell solution with Stokes fields
    :param v: Velocity field, shape (n_nodes, 3)
    :param grads: Shape gradients of sol, computed on demand when omitted
    :return: 3x3 derivative
    """
    if not sol.has_stokes:
        raise ValueError("Cell solution carries no Stokes fields")
    if grads is not None and grads.K is not None:
        return _contract(grads.K, v)
    volume, _, _ = mesh_volumes(mesh)
    r_volume = _volume_gradient(mesh, np.arange(mesh.n_elements))
    return _contract(_fluid_gradients(mesh, sol, volume, r_volume), v)


def delta_A(
    mesh: CellMesh, d: ElasticityTensor, sol: CellSolution, v: np.ndarray,
    grads: Optional[ShapeGradients] = None,
) -> np.ndarray:
    if grads is None:
        grads = shape_gradients(mesh, d, sol)
    return _contract(grads.A, v)


def delta_C(
    mesh: CellMesh, d: ElasticityTensor, sol: CellSolution, v: np.ndarray,
    grads: Optional[ShapeGradients] = None,
) -> np.ndarray:
    if grads is None:
        grads = shape_gradients(mesh, d, sol)
    return _contract(grads.C, v)


def delta_N(
    mesh: CellMesh, d: ElasticityTensor, sol: CellSolution, v: np.ndarray,
    grads: Optional[ShapeGradients] = None,
) -> float:
    if grads is None:
        grads = shape_gradients(mesh, d, sol)
    return float(_contract(grads.N, v))


def delta_phi(mesh: CellMesh, v: np.ndarray, grads: Optional[ShapeGradients] = None) -> float:
    """delta phi = (int_{Y_c} div V - phi int_Y div V) / |Y|."""
    if grads is not None:
        return float(_contract(grads.phi, v))
    volume, _, fluid_volume = mesh_volumes(mesh)
    r_volume = _volume_gradient(mesh, np.arange(mesh.n_elements))
    r_fluid = _volume_gradient(mesh, mesh.fluid_elements)
    r_phi = r_fluid / volume - (fluid_volume / volume) * r_volume / volume
    return float(_contract(r_phi, v))


def delta_B_M(d_c: np.ndarray, d_phi, d_n, gamma: float):
    """delta B = delta C + delta phi I and delta M = delta N + gamma delta phi (batched)."""
    d_phi = np.asarray(d_phi, dtype=float)
    d_b = np.asarray(d_c) + d_phi[..., None, None] * EYE
    d_m = np.asarray(d_n, dtype=float) + gamma * d_phi
    return d_b, d_m


def delta_CC(h: HomCoefficients, d_a: np.ndarray, d_b: np.ndarray, d_m):
    """
    Derivative of the undrained compliance and bulk modulus (batched over leading axes)

    With a = A^-1 B: delta(1/K_bulk) = delta M + 2 delta B : a + B : delta(A^-1) B,
    delta CC = delta(A^-1) - delta K_bulk a x a - K_bulk (delta a x a + a x delta a).

    :param h: Coefficients at the current design
    :param d_a: delta A in Voigt storage, (..., 6, 6)
    :param d_b: delta B, (..., 3, 3)
    :param d_m: delta M, (...)
    :return: (delta CC in Voigt storage, delta K_bulk)
    """
    try:
        a_inv = np.linalg.inv(to_mandel(h.A))
    except np.linalg.LinAlgError as e:
        raise DomainException(f"Singular drained stiffness ({e})") from e
    b = sym_to_mandel(h.B)
    k_bulk = undrained_constants(h).K_bulk
    a = a_inv @ b
    d_a_inv = -np.einsum("ij,...jk,kl->...il", a_inv, to_mandel(np.asarray(d_a)), a_inv)
    db = sym_to_mandel(np.asarray(d_b))
    d_inv_k = np.asarray(d_m) + 2.0 * db @ a + np.einsum("i,...ij,j->...", b, d_a_inv, b)
    d_k = -k_bulk ** 2 * d_inv_k
    da = np.einsum("...ij,j->...i", d_a_inv, b) + np.einsum("ij,...j->...i", a_inv, db)
    d_cc = (
        d_a_inv
        - d_k[..., None, None] * np.outer(a, a)
        - k_bulk * (np.einsum("...i,j->...ij", da, a) + np.einsum("i,...j->...ij", a, da))
    )
    return from_mandel(d_cc), d_k


def chain_gradient(
    box: SplineBox,
    mesh: CellMesh,
    d: ElasticityTensor,
    sol: CellSolution,
    h: HomCoefficients,
    theta: Optional[np.ndarray] = None,
    undrained: bool = False,
) -> CoefficientGradients:
    """
    Gradients of all coefficients over the free (alpha-tilde, beta) coordinates

    :param box: Spline box
    :param mesh: Morphed cell mesh (its preimages define the velocity fields)
    :param d: Solid elasticity
    :param sol: Cell solution on mesh
    :param h: Unrotated coefficients on mesh
    :param theta: If given, gradients of the coefficients rotated by R(theta) plus the
        theta derivatives
    :param undrained: Also differentiate CC and K_bulk
    :return: CoefficientGradients
    """
    sg = shape_gradients(mesh, d, sol)
    w, t = velocity_matrix(box, mesh.preimages)

    def reduce(r: np.ndarray) -> np.ndarray:
        lead = r.shape[:-2]
        full = np.einsum("nm,...nr->...mr", w, r, optimize=True).reshape(lead + (-1,))
        grad = (t.T @ full.reshape(-1, full.shape[-1]).T).T.reshape(lead + (t.shape[1],))
        return np.moveaxis(grad, -1, 0)

    d_a, d_c, d_n, d_phi = reduce(sg.A), reduce(sg.C), reduce(sg.N), reduce(sg.phi)
    d_k = reduce(sg.K) if sg.K is not None else np.zeros((box.n_shape_free, 3, 3))
    d_a = 0.5 * (d_a + np.swapaxes(d_a, -1, -2))
    d_c = 0.5 * (d_c + np.swapaxes(d_c, -1, -2))

    theta_grads = None
    if theta is not None:
        r = rotation_matrix(theta)
        d_a, d_c, d_k = rotate_fourth(d_a, r), rotate_second(d_c, r), rotate_second(d_k, r)
        theta_grads = rotate_coefficients(h, theta).derivatives
        h = rotate_coefficients(h, theta).coefficients
    d_b, d_m = delta_B_M(d_c, d_phi, d_n, h.gamma)

    d_cc = d_kb = None
    if undrained:
        d_cc, d_kb = delta_CC(h, d_a, d_b, d_m)
    return CoefficientGradients(
        A=d_a, C=d_c, B=d_b, N=d_n, M=d_m, phi=d_phi, K=d_k,
        volume=reduce(sg.volume), fluid_volume=reduce(sg.fluid_volume),
        CC=d_cc, K_bulk=d_kb, theta=theta_grads,
    )


def _quantities(h: HomCoefficients, undrained: bool) -> Dict[str, np.ndarray]:
    values = {
        "A": h.A, "C": h.C, "N": np.array(h.N), "phi": np.array(h.phi), "K": h.K, "B": h.B,
    }
    if undrained:
        values["CC"] = undrained_constants(h).CC
    return values


def check_gradients(
    box: SplineBox,
    mesh: CellMesh,
    d: ElasticityTensor,
    coordinates: Iterable[int],
    steps: Sequence[float] = (1e-3, 1e-4),
    gamma: float = 0.0,
    undrained: bool = False,
    design: Optional[DesignVector] = None,
) -> pd.DataFrame:
    """
    Central finite differences of the morph-solve-homogenize pipeline against the
    analytic shape gradients

    :param box: Spline box
    :param mesh: Reference (undeformed) mesh
    :param d: Solid elasticity
    :param coordinates: Free coordinates to check
    :param steps: Finite difference steps
    :param gamma: Fluid compressibility (enters B, M and CC)
    :param undrained: Also check CC
    :param design: Base design (zero by default)
    :return: One row per (coordinate, quantity, step) with the relative error
    """
    design = DesignVector.zeros(box) if design is None else design
    x0 = design.free_vector()
    stokes = len(mesh.fluid_elements) > 0

    def evaluate(x):
        m = morph(mesh, box, design_from_free(box, x))
        s = solve_cell_problems(m, d, stokes=stokes)
        return m, s, compute_coefficients(m, d, s, gamma=gamma)

    base_mesh, base_sol, base_h = evaluate(x0)
    grads = chain_gradient(box, base_mesh, d, base_sol, base_h, undrained=undrained)
    base_values = _quantities(base_h, undrained)

    rows = []
    for c in coordinates:
        analytic = {
            "A": grads.A[c], "C": grads.C[c], "N": grads.N[c], "phi": grads.phi[c],
            "K": grads.K[c], "B": grads.B[c],
        }
        if undrained:
            analytic["CC"] = grads.CC[c]
        for step in steps:
            e = np.zeros_like(x0)
            e[c] = step
            plus = _quantities(evaluate(x0 + e)[2], undrained)
            minus = _quantities(evaluate(x0 - e)[2], undrained)
            for name, an in analytic.items():
                fd = (plus[name] - minus[name]) / (2.0 * step)
                scale = max(
                    np.linalg.norm(an), np.linalg.norm(fd), 1e-5 * np.linalg.norm(base_values[name])
                )
                error = np.linalg.norm(fd - an) / scale if scale > 0 else 0.0
                rows.append(
                    {
                        "coordinate": int(c),
                        "quantity": name,
                        "step": step,
                        "analytic_norm": float(np.linalg.norm(an)),
                        "fd_norm": float(np.linalg.norm(fd)),
                        "relative_error": float(error),
                    }
                )
        logger.info(f"Checked coordinate {c}")
    return pd.DataFrame(rows)
