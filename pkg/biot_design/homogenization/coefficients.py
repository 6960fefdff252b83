import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np

from biot_design.fem.cell_problems import CellSolution, ElasticityTensor
from biot_design.fem.hexahedra import ElementGeometry, element_geometry, face_geometry
from biot_design.geometry.cell_mesh import CellMesh, mesh_volumes
from biot_design.homogenization.tensors import (VOIGT_INDEX, HomCoefficients,
                                                UndrainedConstants,
                                                from_mandel, mandel_to_sym,
                                                strain_to_voigt, sym_to_mandel,
                                                to_mandel, voigt_to_strain,
                                                voigt_to_stress)
from biot_design.resources.basics import DomainException

logger = logging.getLogger("homogenize")

UNIT_STRAINS = voigt_to_strain(np.eye(6))


def stress(d: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    """Stress d : sym(gradient) for a batch of 3x3 displacement gradients."""
    return voigt_to_stress(strain_to_voigt(gradient) @ d.T)


@dataclass(frozen=True)
class SolidFields:
    """
    Quadrature values on the solid elements: displacement gradients of the correctors
    (grad_omega, grad_p), the total fields omega^I + Pi^I (grad_total) and stresses.
    """

    geom: ElementGeometry
    elements: np.ndarray
    grad_omega: np.ndarray  # (6, E, Q, 3, 3)
    grad_total: np.ndarray  # (6, E, Q, 3, 3)
    grad_p: np.ndarray  # (E, Q, 3, 3)
    stress_total: np.ndarray
    stress_p: np.ndarray


@dataclass(frozen=True)
class FluidFields:
    geom2: ElementGeometry
    geom1: ElementGeometry
    elements: np.ndarray
    psi: np.ndarray  # (3, E, Q, 3) velocity of load k
    grad_psi: np.ndarray  # (3, E, Q, 3, 3)
    pi: np.ndarray  # (3, E, Q)


def solid_fields(mesh: CellMesh, d: ElasticityTensor, sol: CellSolution) -> SolidFields:
    elements = mesh.solid_elements
    geom = element_geometry(mesh.element_coords(elements))
    hexes = mesh.hexes[elements]
    grad_omega = np.einsum("Ieac,eqaj->Ieqcj", sol.omega[:, hexes], geom.gradients, optimize=True)
    grad_p = np.einsum("eac,eqaj->eqcj", sol.omega_p[hexes], geom.gradients, optimize=True)
    grad_total = grad_omega + UNIT_STRAINS[:, None, None]
    dv = np.asarray(d.voigt)
    return SolidFields(
        geom, elements, grad_omega, grad_total, grad_p,
        stress(dv, grad_total), stress(dv, grad_p),
    )


def fluid_fields(mesh: CellMesh, sol: CellSolution) -> FluidFields:
    if not sol.has_stokes:
        raise ValueError("Cell solution carries no Stokes fields")
    elements = mesh.fluid_elements
    coords = mesh.element_coords(elements)
    g2 = element_geometry(coords, order=3, basis="q2")
    g1 = element_geometry(coords, order=3, basis="q1")
    nodal = sol.psi[:, sol.q2_nodes]  # (3, E, 27, 3)
    psi = np.einsum("qa,keac->keqc", g2.shape, nodal, optimize=True)
    grad_psi = np.einsum("keac,eqaj->keqcj", nodal, g2.gradients, optimize=True)
    pi = np.einsum("qa,kea->keq", g1.shape, sol.pi[:, mesh.hexes[elements]], optimize=True)
    return FluidFields(g2, g1, elements, psi, grad_psi, pi)


def compute_coefficients(
    mesh: CellMesh,
    d: ElasticityTensor,
    sol: CellSolution,
    gamma: float = 0.0,
    viscosity: float = 1.0,
) -> HomCoefficients:
    """
    Homogenized coefficients from solved cell problems

    All cell integrals are divided by the measured cell volume |Y|.

    :param mesh: Cell mesh the solution lives on
    :param d: Solid elasticity
    :param sol: Cell problem solutions
    :param gamma: Fluid compressibility
    :param viscosity: Fluid viscosity (used by the macroscopic Darcy law)
    :return: HomCoefficients
    """
    volume, _, fluid_volume = mesh_volumes(mesh)
    sf = solid_fields(mesh, d, sol)
    dx = sf.geom.dx

    a = np.einsum("Ieqij,Jeqij,eq->IJ", sf.stress_total, sf.grad_total, dx, optimize=True)
    a = 0.5 * (a + a.T) / volume
    div = np.trace(sf.grad_omega, axis1=-2, axis2=-1)
    c_voigt = -np.einsum("Ieq,eq->I", div, dx) / volume
    n = float(np.einsum("eqij,eqij,eq->", sf.stress_p, sf.grad_p, dx)) / volume

    k = np.zeros((3, 3))
    if sol.has_stokes:
        ff = fluid_fields(mesh, sol)
        k = np.einsum("jeqi,eq->ij", ff.psi, ff.geom2.dx) / volume
        k = 0.5 * (k + k.T)

    h = HomCoefficients(
        A=a,
        C=c_voigt[VOIGT_INDEX],
        N=n,
        K=k,
        phi=fluid_volume / volume,
        gamma=float(gamma),
        viscosity=float(viscosity),
    )
    logger.info(
        f"Coefficients: A11={a[0, 0]:.5g}, C11={h.C[0, 0]:.5g}, N={n:.5g}, "
        f"K11={k[0, 0]:.5g}, phi={h.phi:.5g}"
    )
    return h


def dual_coefficients(mesh: CellMesh, d: ElasticityTensor, sol: CellSolution) -> Dict[str, Any]:
    """
    Second evaluation of C, N and K through the alternative cell integrals:
    C_ij = a(omega^P, Pi^ij), N = int_Gamma omega^P . n and K_ij = int grad psi^i : grad psi^j.
    """
    volume, _, _ = mesh_volumes(mesh)
    sf = solid_fields(mesh, d, sol)
    c_voigt = np.einsum("eqij,Iij,eq->I", sf.stress_p, UNIT_STRAINS, sf.geom.dx) / volume
    n = 0.0
    if len(mesh.interface):
        shape, area = face_geometry(mesh.element_coords(mesh.interface[:, 0]), mesh.interface[:, 1])
        values = np.einsum("fqa,fac->fqc", shape, sol.omega_p[mesh.hexes[mesh.interface[:, 0]]])
        n = float(np.einsum("fqc,fqc->", values, area)) / volume
    k = np.zeros((3, 3))
    if sol.has_stokes:
        ff = fluid_fields(mesh, sol)
        k = np.einsum("ieqab,jeqab,eq->ij", ff.grad_psi, ff.grad_psi, ff.geom2.dx) / volume
    return {"C": c_voigt[VOIGT_INDEX], "N": n, "K": k}


def undrained_constants(h: HomCoefficients) -> UndrainedConstants:
    """
    Undrained compliance, Skempton tensor and bulk modulus

    K_bulk = 1 / (M + B : A^-1 B), S = K_bulk A^-1 B and
    CC = A^-1 - K_bulk (A^-1 B) x (A^-1 B), obtained by eliminating p with zeta = 0.

    :param h: Homogenized coefficients
    :return: UndrainedConstants
    """
    a_inv = np.linalg.inv(to_mandel(h.A))
    b = sym_to_mandel(h.B)
    denominator = h.M + b @ a_inv @ b
    if denominator <= 0.0:
        raise DomainException(
            f"Undrained constants undefined: M + B:A^-1 B = {denominator:.3e} <= 0"
        )
    k_bulk = 1.0 / denominator
    ab = a_inv @ b
    return UndrainedConstants(
        CC=from_mandel(a_inv - k_bulk * np.outer(ab, ab)),
        S=mandel_to_sym(k_bulk * ab),
        K_bulk=float(k_bulk),
    )


def drained_response(h: HomCoefficients, strain: np.ndarray, pressure: float) -> Tuple[np.ndarray, float]:
    """sigma = A e - B p and zeta = B : e + M p."""
    e = sym_to_mandel(strain)
    b = sym_to_mandel(h.B)
    sigma = to_mandel(h.A) @ e - b * pressure
    return mandel_to_sym(sigma), float(b @ e + h.M * pressure)


def undrained_response(
    h: HomCoefficients, u: UndrainedConstants, sigma: np.ndarray, zeta: float
) -> Tuple[np.ndarray, float]:
    """e = CC sigma + S zeta and p = K_bulk zeta - S : sigma."""
    s = sym_to_mandel(sigma)
    skempton = sym_to_mandel(u.S)
    e = to_mandel(u.CC) @ s + skempton * zeta
    return mandel_to_sym(e), float(u.K_bulk * zeta - skempton @ s)


def coefficients_to_record(
    h: HomCoefficients, undrained: Optional[UndrainedConstants] = None
) -> Dict[str, Any]:
    record = {
        "A": h.A,
        "B": h.B,
        "C": h.C,
        "K": h.K,
        "N": h.N,
        "M": h.M,
        "phi": h.phi,
        "gamma": h.gamma,
        "viscosity": h.viscosity,
    }
    if undrained is not None:
        record.update({"CC": undrained.CC, "S": undrained.S, "K_bulk": undrained.K_bulk})
    return {k: (v.tolist() if isinstance(v, np.ndarray) else float(v)) for k, v in record.items()}


def coefficients_from_record(record: Dict[str, Any]) -> HomCoefficients:
    try:
        return HomCoefficients(
            A=np.asarray(record["A"], dtype=float),
            C=np.asarray(record["C"], dtype=float),
            N=float(record["N"]),
            K=np.asarray(record["K"], dtype=float),
            phi=float(record["phi"]),
            gamma=float(record.get("gamma", 0.0)),
            viscosity=float(record.get("viscosity", 1.0)),
        )
    except (KeyError, ValueError, TypeError) as e:
        raise ValueError(f"Malformed coefficient record ({e})") from e
