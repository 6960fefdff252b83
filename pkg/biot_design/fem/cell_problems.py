import logging
import time
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from biot_design.fem.assembly import (assemble, assemble_vector,
                                      elasticity_stiffness, scalar_stiffness,
                                      strain_load, vector_dofs)
from biot_design.fem.hexahedra import (element_geometry, face_geometry,
                                       q2_node_corners)
from biot_design.geometry.cell_mesh import (CellMesh, fluid_components,
                                            solid_components)
from biot_design.homogenization.tensors import (VOIGT_INDEX,
                                                isotropic_stiffness,
                                                voigt_to_tensor)
from biot_design.resources.basics import SolverException

logger = logging.getLogger("cell_fem")


@dataclass(frozen=True)
class ElasticityTensor:
    voigt: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.voigt, dtype=float)
        if d.shape != (6, 6) or not np.allclose(d, d.T, rtol=1e-12, atol=1e-14):
            raise ValueError("Elasticity tensor must be a symmetric 6x6 Voigt matrix")
        if np.linalg.eigvalsh(d).min() <= 0.0:
            raise ValueError("Elasticity tensor must be positive definite")

    @classmethod
    def isotropic(cls, young: float, poisson: float) -> "ElasticityTensor":
        return cls(isotropic_stiffness(young, poisson))

    @property
    def full(self) -> np.ndarray:
        return voigt_to_tensor(np.asarray(self.voigt))


@dataclass(frozen=True)
class CellSolution:
    """
    Nodal cell-problem solutions on one mesh.

    omega[I] is the elastic corrector of Voigt pair I and omega_p the pressure corrector,
    both stored at every mesh node (zero off the solid). psi[k] is the velocity for body
    force e_k at the triquadratic nodes q2_nodes of the fluid elements and pi[k] the
    pressure at mesh nodes.
    """

    omega: np.ndarray
    omega_p: np.ndarray
    psi: Optional[np.ndarray] = None
    pi: Optional[np.ndarray] = None
    q2_nodes: Optional[np.ndarray] = None
    residuals: Dict[str, float] = field(default_factory=dict)

    @property
    def has_stokes(self) -> bool:
        return self.psi is not None


def corrector(sol: CellSolution, i: int, j: int) -> np.ndarray:
    return sol.omega[VOIGT_INDEX[i, j]]


def _factorize(matrix: sp.spmatrix, name: str):
    try:
        return splu(matrix.tocsc())
    except RuntimeError as e:
        raise SolverException(f"{name}: singular system ({e})") from e


def _scatter_nodal(mesh: CellMesh, unique_masters: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Spread values on compressed master nodes to every mesh node (zero elsewhere)."""
    local = np.full(mesh.n_nodes, -1)
    local[unique_masters] = np.arange(len(unique_masters))
    loc = local[mesh.master_map]
    out = np.zeros(values.shape[:-2] + (mesh.n_nodes,) + values.shape[-1:])
    valid = loc >= 0
    out[..., valid, :] = values[..., loc[valid], :]
    return out


def _solve_elasticity(mesh: CellMesh, d: ElasticityTensor) -> Tuple[np.ndarray, np.ndarray, float]:
    solid = mesh.solid_elements
    if len(solid) == 0:
        raise SolverException("elasticity: the cell has no solid elements")
    if solid_components(mesh) > 1:
        raise SolverException("elasticity: solid region is disconnected, system is singular")

    masters = mesh.master_map[mesh.hexes[solid]]
    unique, local = np.unique(masters, return_inverse=True)
    local = local.reshape(masters.shape)
    n_dofs = 3 * len(unique)
    dofs = vector_dofs(local)

    geom = element_geometry(mesh.element_coords(solid))
    stiffness = assemble(dofs, dofs, elasticity_stiffness(geom, d.voigt), (n_dofs, n_dofs))

    volume_weights = (geom.shape[None] * geom.dx[:, :, None]).sum(axis=1)
    mean_rows = []
    for c in range(3):
        mean_rows.append(assemble_vector(3 * local + c, volume_weights, n_dofs))
    mean = sp.csr_matrix(np.array(mean_rows))

    loads = np.zeros((n_dofs, 7))
    for voigt in range(6):
        strain = np.eye(6)[voigt]
        loads[:, voigt] = -assemble_vector(dofs, strain_load(geom, d.voigt, strain), n_dofs)

    if len(mesh.interface):
        position = np.full(mesh.n_elements, -1)
        position[solid] = np.arange(len(solid))
        owners = position[mesh.interface[:, 0]]
        shape, area = face_geometry(mesh.element_coords(mesh.interface[:, 0]), mesh.interface[:, 1])
        facet_loads = np.einsum("fqa,fqc->fac", shape, area).reshape(len(owners), -1)
        loads[:, 6] = assemble_vector(dofs[owners], facet_loads, n_dofs)

    system = sp.bmat([[stiffness, mean.T], [mean, None]])
    start = time.time()
    lu = _factorize(system, "elasticity")
    rhs = np.vstack([loads, np.zeros((3, 7))])
    sol = lu.solve(rhs)
    residual = np.linalg.norm(system @ sol - rhs) / max(np.linalg.norm(rhs), 1e-300)
    logger.info(
        f"Elastic cell problems: {n_dofs} DOFs, relative residual {residual:.2e}, "
        f"{time.time() - start:.2f}s"
    )
    fields = sol[:n_dofs].T.reshape(7, -1, 3)
    nodal = _scatter_nodal(mesh, unique, fields)
    return nodal[:6], nodal[6], float(residual)


def solve_elastic_correctors(mesh: CellMesh, d: ElasticityTensor) -> np.ndarray:
    """
    Periodic elastic correctors for the six unit macroscopic strains

    :param mesh: Cell mesh
    :param d: Solid elasticity
    :return: Nodal fields, shape (6, n_nodes, 3)
    """
    omega, _, _ = _solve_elasticity(mesh, d)
    return omega


def solve_pressure_corrector(mesh: CellMesh, d: ElasticityTensor) -> np.ndarray:
    """Periodic corrector for a unit pore pressure acting on the interface, (n_nodes, 3)."""
    _, omega_p, _ = _solve_elasticity(mesh, d)
    return omega_p


def q2_numbering(mesh: CellMesh) -> np.ndarray:
    """
    Global triquadratic node ids per element, shape (E, 27). Entities are keyed by
    their sorted periodic-master corner ids, so opposite faces share nodes.
    """
    masters = mesh.master_map[mesh.hexes]
    corners = q2_node_corners()
    numbering = np.empty((mesh.n_elements, 27), dtype=int)
    offset = 0
    for size in (1, 2, 4, 8):
        local = [a for a in range(27) if len(corners[a]) == size]
        idx = np.array([corners[a] for a in local])
        keys = np.sort(masters[:, idx], axis=-1).reshape(-1, size)
        _, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(mesh.n_elements, len(local))
        numbering[:, local] = inverse + offset
        offset += int(inverse.max()) + 1
    return numbering


def solve_stokes(mesh: CellMesh) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """
    Taylor-Hood Stokes cell problems with unit body forces e_k

    :param mesh: Cell mesh with a nonempty fluid region
    :return: psi (3, n_q2, 3), pi (3, n_nodes), Q2 node ids of fluid elements (E_f, 27),
        maximal divergence residual
    """
    fluid = mesh.fluid_elements
    if len(fluid) == 0:
        raise SolverException("stokes: the cell has no fluid elements")

    numbering = q2_numbering(mesh)
    fluid_q2 = numbering[fluid]
    no_slip = np.intersect1d(fluid_q2, numbering[mesh.solid_elements])
    f_unique, f_local = np.unique(fluid_q2, return_inverse=True)
    f_local = f_local.reshape(fluid_q2.shape)
    free = ~np.isin(f_unique, no_slip)
    n_free = int(free.sum())
    v_map = np.full(len(f_unique), -1)
    v_map[free] = np.arange(n_free)
    v_local = v_map[f_local]

    p_masters = mesh.master_map[mesh.hexes[fluid]]
    p_unique, p_local = np.unique(p_masters, return_inverse=True)
    p_local = p_local.reshape(p_masters.shape)
    n_p = len(p_unique)

    coords = mesh.element_coords(fluid)
    g2 = element_geometry(coords, order=3, basis="q2")
    g1 = element_geometry(coords, order=3, basis="q1")

    lap = assemble(v_local, v_local, scalar_stiffness(g2), (n_free, n_free))
    laplacian = sp.block_diag([lap, lap, lap]).tocsr()
    div_blocks = []
    for c in range(3):
        blocks = np.einsum("qp,eqa,eq->epa", g1.shape, g2.gradients[..., c], g2.dx, optimize=True)
        cols = np.where(v_local >= 0, c * n_free + v_local, -1)
        div_blocks.append(assemble(p_local, cols, blocks, (n_p, 3 * n_free)))
    divergence = div_blocks[0] + div_blocks[1] + div_blocks[2]

    n_comp, comp = fluid_components(mesh)
    p_weights = (g1.shape[None] * g1.dx[:, :, None]).sum(axis=1)
    mean = assemble(comp[:, None], p_local, p_weights[:, None, :], (n_comp, n_p))
    on_boundary = np.zeros(mesh.n_nodes, dtype=bool)
    on_boundary[mesh.boundary_nodes()] = True
    touches = np.zeros(n_comp, dtype=bool)
    np.logical_or.at(touches, comp, on_boundary[mesh.hexes[fluid]].any(axis=1))
    for c in np.flatnonzero(~touches):
        logger.warning(f"Fluid component {c} is enclosed, permeability is only semidefinite")

    body = assemble_vector(v_local, np.einsum("qa,eq->ea", g2.shape, g2.dx), n_free)
    rhs = np.zeros((3 * n_free + n_p + n_comp, 3))
    for k in range(3):
        rhs[k * n_free:(k + 1) * n_free, k] = body

    system = sp.bmat(
        [[laplacian, -divergence.T, None], [-divergence, None, mean.T], [None, mean, None]]
    )
    start = time.time()
    lu = _factorize(system, "stokes")
    sol = lu.solve(rhs)
    velocity = sol[:3 * n_free]
    div_residual = float(np.abs(divergence @ velocity).max()) if n_p else 0.0
    logger.info(
        f"Stokes cell problems: {3 * n_free} velocity and {n_p} pressure DOFs, "
        f"{n_comp} fluid component(s), divergence residual {div_residual:.2e}, "
        f"{time.time() - start:.2f}s"
    )

    psi = np.zeros((3, len(f_unique), 3))
    for k in range(3):
        for c in range(3):
            psi[k, free, c] = velocity[c * n_free:(c + 1) * n_free, k]
    pressure = sol[3 * n_free:3 * n_free + n_p].T[:, :, None]
    pi = _scatter_nodal(mesh, p_unique, pressure)[..., 0]
    return psi, pi, f_local, div_residual


def solve_cell_problems(mesh: CellMesh, d: ElasticityTensor, stokes: bool = True) -> CellSolution:
    """
    All cell problems of one microstructure

    :param mesh: Cell mesh
    :param d: Solid elasticity
    :param stokes: Whether to solve the Stokes problems (skipped without fluid)
    :return: CellSolution
    """
    omega, omega_p, residual = _solve_elasticity(mesh, d)
    residuals = {"elasticity": residual}
    if stokes and len(mesh.fluid_elements):
        psi, pi, q2_nodes, div_residual = solve_stokes(mesh)
        residuals["divergence"] = div_residual
        return CellSolution(omega, omega_p, psi, pi, q2_nodes, residuals)
    return CellSolution(omega, omega_p, residuals=residuals)
