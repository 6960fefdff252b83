"""
Steady macroscopic Biot-Darcy problem on hexahedral meshes, its adjoint and the
element-wise linearization of the Lagrangian in the homogenized coefficients.

Displacement u and pressure P = p + p_bar are trilinear. The Darcy equation does not
involve u, so P is solved first and then drives the elasticity problem through B.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import meshio
import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from biot_design.fem.assembly import (assemble, assemble_vector,
                                      coupling_matrix, elasticity_stiffness,
                                      scalar_stiffness, strain_matrix,
                                      vector_dofs)
from biot_design.fem.hexahedra import (FACE_CORNERS, HEX_CORNERS,
                                       element_geometry, face_geometry,
                                       face_gradients)
from biot_design.homogenization.tensors import (HomCoefficients,
                                                voigt_to_strain)
from biot_design.resources.basics import MeshException, SolverException
from biot_design.resources.constants import (MACRO_SHAPE, MACRO_SIZE,
                                             PRESSURE_1, PRESSURE_2,
                                             TARGET_FLUX, TRACTION,
                                             TRACTION_STRIP)

logger = logging.getLogger("macro_biot")

SIDES = ("xmin", "xmax", "ymin", "ymax", "zmin", "zmax")


@dataclass(frozen=True)
class MacroMesh:
    """
    Hexahedral mesh of the macroscopic domain. facets maps a boundary tag to an
    (F, 2) array of (element, local face); subdomains maps elements to Omega_e.
    """

    nodes: np.ndarray
    hexes: np.ndarray
    facets: Dict[str, np.ndarray]
    subdomains: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.hexes)

    def element_coords(self, elements: Optional[np.ndarray] = None) -> np.ndarray:
        hexes = self.hexes if elements is None else self.hexes[elements]
        return self.nodes[hexes]

    def facet_nodes(self, tag: str) -> np.ndarray:
        facets = self.facets[tag]
        if len(facets) == 0:
            return np.zeros(0, dtype=int)
        return np.unique(self.hexes[facets[:, 0][:, None], FACE_CORNERS[facets[:, 1]]])

    def boundary_nodes(self) -> np.ndarray:
        return np.unique(np.concatenate([self.facet_nodes(s) for s in SIDES]))

    def elements_touching(self, tag: str) -> np.ndarray:
        nodes = self.facet_nodes(tag)
        return np.flatnonzero(np.isin(self.hexes, nodes).any(axis=1))


def _facet_keys(mesh: MacroMesh, facets: np.ndarray) -> set:
    return {tuple(f) for f in np.asarray(facets).reshape(-1, 2)}


def validate_tags(mesh: MacroMesh) -> None:
    """Check the boundary partitions D/N and p/w and the separation of the two pressure parts."""
    boundary = set().union(*[_facet_keys(mesh, mesh.facets[s]) for s in SIDES])
    for first, second in (("dirichlet", "neumann"), ("pressure", "wall")):
        a, b = _facet_keys(mesh, mesh.facets[first]), _facet_keys(mesh, mesh.facets[second])
        if a & b or (a | b) != boundary:
            raise MeshException(f"macro mesh: {first} and {second} must partition the boundary")
    if not _facet_keys(mesh, mesh.facets["traction"]) <= _facet_keys(mesh, mesh.facets["neumann"]):
        raise MeshException("macro mesh: traction patch must lie on the Neumann boundary")
    shared = np.intersect1d(mesh.facet_nodes("pressure_1"), mesh.facet_nodes("pressure_2"))
    if len(mesh.facet_nodes("pressure_1")) == 0 or len(mesh.facet_nodes("pressure_2")) == 0:
        raise MeshException("macro mesh: both pressure boundaries must be nonempty")
    if len(shared):
        raise MeshException(f"macro mesh: pressure boundaries share {len(shared)} nodes")
    if len(mesh.facets["dirichlet"]) == 0:
        raise MeshException("macro mesh: the displacement Dirichlet boundary is empty")


def box_mesh(
    shape: Sequence[int] = MACRO_SHAPE,
    size: Sequence[float] = MACRO_SIZE,
    dirichlet: Sequence[str] = ("ymin",),
    pressure_1: Sequence[str] = ("xmin",),
    pressure_2: Sequence[str] = ("xmax",),
    traction_side: str = "ymax",
    traction_strip: Tuple[int, float] = (0, TRACTION_STRIP),
) -> MacroMesh:
    """
    Structured hexahedral mesh of [0, Lx] x [0, Ly] x [0, Lz]

    :param shape: Elements per direction
    :param size: Edge lengths
    :param dirichlet: Sides with u = 0
    :param pressure_1: Sides with P = p_bar^1
    :param pressure_2: Sides with P = p_bar^2
    :param traction_side: Side carrying the traction patch
    :param traction_strip: (axis, limit): patch facets have centroid coordinate <= limit
    :return: MacroMesh with side tags and the derived tags dirichlet, neumann, pressure,
        wall and traction
    """
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3 or min(shape) < 1 or min(size) <= 0:
        raise ValueError(f"Invalid macro box shape {shape} / size {size}")
    axes = [np.linspace(0.0, float(length), n + 1) for length, n in zip(size, shape)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    cells = np.indices(shape).reshape(3, -1).T
    corners = cells[:, None, :] + HEX_CORNERS[None, :, :]
    hexes = np.ravel_multi_index(tuple(np.moveaxis(corners, -1, 0)), tuple(n + 1 for n in shape))

    facets = {}
    for f, name in enumerate(SIDES):
        axis, side = divmod(f, 2)
        elements = np.flatnonzero(cells[:, axis] == (shape[axis] - 1 if side else 0))
        facets[name] = np.stack([elements, np.full(len(elements), f)], axis=1)

    def union(names):
        return np.concatenate([facets[n] for n in names]) if names else np.zeros((0, 2), dtype=int)

    def complement(tagged):
        keys = {tuple(f) for f in tagged}
        rest = [f for f in union(SIDES) if tuple(f) not in keys]
        return np.array(rest, dtype=int).reshape(-1, 2)

    facets["dirichlet"] = union(dirichlet)
    facets["neumann"] = complement(facets["dirichlet"])
    facets["pressure_1"] = union(pressure_1)
    facets["pressure_2"] = union(pressure_2)
    facets["pressure"] = np.concatenate([facets["pressure_1"], facets["pressure_2"]])
    facets["wall"] = complement(facets["pressure"])

    patch = facets[traction_side]
    axis, limit = traction_strip
    centroids = grid[hexes[patch[:, 0]]].mean(axis=1)[:, axis]
    facets["traction"] = patch[centroids <= limit + 1e-12]

    mesh = MacroMesh(grid, hexes, facets, np.arange(len(hexes)))
    validate_tags(mesh)
    logger.info(
        f"Macro mesh {shape}: {mesh.n_nodes} nodes, {mesh.n_elements} elements, "
        f"{len(facets['traction'])} traction facets"
    )
    return mesh


@dataclass(frozen=True)
class MacroCoefficients:
    """Per-element drained stiffness A (Voigt), coupling B and Darcy tensor K / viscosity."""

    A: np.ndarray
    B: np.ndarray
    K_eff: np.ndarray

    @classmethod
    def uniform(cls, h: HomCoefficients, n_elements: int) -> "MacroCoefficients":
        return cls(
            np.repeat(np.asarray(h.A)[None], n_elements, axis=0),
            np.repeat(h.B[None], n_elements, axis=0),
            np.repeat((np.asarray(h.K) / h.viscosity)[None], n_elements, axis=0),
        )

    def with_elements(self, elements: np.ndarray, h: HomCoefficients) -> "MacroCoefficients":
        a, b, k = self.A.copy(), self.B.copy(), self.K_eff.copy()
        a[elements], b[elements], k[elements] = h.A, h.B, np.asarray(h.K) / h.viscosity
        return MacroCoefficients(a, b, k)


@dataclass(frozen=True)
class MacroData:
    pressure_1: float = PRESSURE_1
    pressure_2: float = PRESSURE_2
    traction: Tuple[float, float, float] = TRACTION
    target_flux: float = TARGET_FLUX


@dataclass
class MacroSystem:
    """Assembled operators: K_u (elasticity), Kc (Darcy), Bc (coupling) and load g."""

    mesh: MacroMesh
    coefficients: MacroCoefficients
    data: MacroData
    stiffness: sp.csr_matrix
    darcy: sp.csr_matrix
    coupling: sp.csr_matrix
    load: np.ndarray
    u_free: np.ndarray
    p_free: np.ndarray
    _factors: Dict[str, object] = field(default_factory=dict, repr=False)

    def factor(self, name: str):
        if name not in self._factors:
            if name == "stiffness":
                matrix = self.stiffness[self.u_free][:, self.u_free]
            else:
                matrix = self.darcy[self.p_free][:, self.p_free]
            try:
                self._factors[name] = splu(matrix.tocsc())
            except RuntimeError as e:
                raise SolverException(f"macro {name}: singular operator ({e})") from e
        return self._factors[name]


def traction_load(mesh: MacroMesh, traction: Sequence[float]) -> np.ndarray:
    facets = mesh.facets["traction"]
    if len(facets) == 0:
        return np.zeros(3 * mesh.n_nodes)
    shape, area = face_geometry(mesh.element_coords(facets[:, 0]), facets[:, 1])
    weights = np.einsum("fqa,fq->fa", shape, np.linalg.norm(area, axis=-1))
    values = weights[:, :, None] * np.asarray(traction, dtype=float)
    dofs = vector_dofs(mesh.hexes[facets[:, 0]])
    return assemble_vector(dofs, values.reshape(len(facets), -1), 3 * mesh.n_nodes)


def assemble_system(mesh: MacroMesh, coefficients: MacroCoefficients, data: MacroData) -> MacroSystem:
    """
    Assemble the macroscopic operators

    :param mesh: Macro mesh
    :param coefficients: Per-element coefficients
    :param data: Boundary data
    :return: MacroSystem
    """
    geom = element_geometry(mesh.element_coords())
    dofs = vector_dofs(mesh.hexes)
    n_u, n_p = 3 * mesh.n_nodes, mesh.n_nodes
    stiffness = assemble(dofs, dofs, elasticity_stiffness(geom, coefficients.A), (n_u, n_u))
    darcy = assemble(mesh.hexes, mesh.hexes, scalar_stiffness(geom, coefficients.K_eff), (n_p, n_p))
    coupling = assemble(dofs, mesh.hexes, coupling_matrix(geom, coefficients.B), (n_u, n_p))

    u_free = np.ones(n_u, dtype=bool)
    u_free[vector_dofs(mesh.facet_nodes("dirichlet")[:, None]).ravel()] = False
    p_free = np.ones(n_p, dtype=bool)
    p_free[mesh.facet_nodes("pressure")] = False
    return MacroSystem(
        mesh, coefficients, data, stiffness, darcy, coupling,
        traction_load(mesh, data.traction), u_free, p_free,
    )


@dataclass(frozen=True)
class MacroState:
    u: np.ndarray  # (n, 3)
    p: np.ndarray
    p_bar: np.ndarray
    residuals: Dict[str, float] = field(default_factory=dict)

    @property
    def P(self) -> np.ndarray:
        return self.p + self.p_bar


@dataclass(frozen=True)
class AdjointState:
    v_tilde: np.ndarray  # (n, 3)
    q_tilde: np.ndarray
    q_tilde_v: np.ndarray
    q_tilde_p: np.ndarray
    p_tilde: np.ndarray
    lam: float


def lift_p_bar(system: MacroSystem) -> np.ndarray:
    mesh, data = system.mesh, system.data
    p_bar = np.zeros(mesh.n_nodes)
    p_bar[mesh.facet_nodes("pressure_1")] = data.pressure_1
    p_bar[mesh.facet_nodes("pressure_2")] = data.pressure_2
    return p_bar


def _relative_residual(matrix, x, rhs) -> float:
    return float(np.linalg.norm(matrix @ x - rhs) / max(np.linalg.norm(rhs), 1e-300))


def _solve_restricted(system: MacroSystem, name: str, rhs: np.ndarray) -> Tuple[np.ndarray, float]:
    free = system.u_free if name == "stiffness" else system.p_free
    matrix = system.stiffness if name == "stiffness" else system.darcy
    out = np.zeros(len(free))
    if not free.any():
        return out, 0.0
    out[free] = system.factor(name).solve(rhs[free])
    sub = matrix[free][:, free]
    return out, _relative_residual(sub, out[free], rhs[free])


def solve_state(system: MacroSystem) -> MacroState:
    """
    Darcy solve c(p, q) = -c(p_bar, q), then elasticity a(u, v) = g(v) + b(p + p_bar, v)

    :param system: Assembled system
    :return: MacroState
    """
    p_bar = lift_p_bar(system)
    p, darcy_residual = _solve_restricted(system, "darcy", -(system.darcy @ p_bar))
    pressure = p + p_bar
    u, elastic_residual = _solve_restricted(
        system, "stiffness", system.load + system.coupling @ pressure
    )
    state = MacroState(
        u.reshape(-1, 3), p, p_bar,
        {"darcy": darcy_residual, "elasticity": elastic_residual},
    )
    logger.info(
        f"Macro state: max |u| {np.abs(state.u).max():.4e}, residuals "
        f"{darcy_residual:.1e} / {elastic_residual:.1e}"
    )
    return state


def lift_tilde_p(mesh: MacroMesh) -> np.ndarray:
    """Nodal indicator of the outflow boundary: 1 at its nodes and 0 at every other node."""
    p_tilde = np.zeros(mesh.n_nodes)
    p_tilde[mesh.facet_nodes("pressure_2")] = 1.0
    return p_tilde


def harmonic_lift_tilde_p(mesh: MacroMesh) -> np.ndarray:
    """Discrete harmonic extension of the same boundary trace as lift_tilde_p."""
    trace = lift_tilde_p(mesh)
    geom = element_geometry(mesh.element_coords())
    laplace = assemble(mesh.hexes, mesh.hexes, scalar_stiffness(geom), (mesh.n_nodes,) * 2)
    interior = np.ones(mesh.n_nodes, dtype=bool)
    interior[mesh.boundary_nodes()] = False
    out = trace.copy()
    if interior.any():
        rhs = -(laplace @ trace)[interior]
        out[interior] = splu(laplace[interior][:, interior].tocsc()).solve(rhs)
    return out


def flux_functional(system: MacroSystem, state: MacroState, p_tilde: Optional[np.ndarray] = None) -> float:
    """Outflow through the second pressure boundary, Psi = -c(p + p_bar, p_tilde)."""
    p_tilde = lift_tilde_p(system.mesh) if p_tilde is None else p_tilde
    return float(-state.P @ (system.darcy @ p_tilde))


def boundary_flux(system: MacroSystem, state: MacroState) -> float:
    """Direct quadrature of -int K grad P . n over the second pressure boundary."""
    mesh = system.mesh
    facets = mesh.facets["pressure_2"]
    coords = mesh.element_coords(facets[:, 0])
    _, area = face_geometry(coords, facets[:, 1])
    grads = face_gradients(coords, facets[:, 1])
    grad_p = np.einsum("fqai,fa->fqi", grads, state.P[mesh.hexes[facets[:, 0]]])
    k = system.coefficients.K_eff[facets[:, 0]]
    return float(-np.einsum("fij,fqj,fqi->", k, grad_p, area))


def compliance(system: MacroSystem, state: MacroState) -> float:
    """Phi(u) = g(u)."""
    return float(system.load @ state.u.ravel())


def solve_adjoint(
    system: MacroSystem, state: MacroState, lam: float, p_tilde: Optional[np.ndarray] = None
) -> AdjointState:
    """
    a(v, v_tilde) = -g(v) and c(q, q_tilde) = b(q, v_tilde) + lam c(q, p_tilde)

    :param system: Assembled system
    :param state: Solved state
    :param lam: Multiplier of the flux functional
    :param p_tilde: Outflow lift (nodal indicator by default)
    :return: AdjointState with q_tilde = q_tilde_v + lam q_tilde_p
    """
    p_tilde = lift_tilde_p(system.mesh) if p_tilde is None else p_tilde
    v_tilde, _ = _solve_restricted(system, "stiffness", -system.load)
    q_v, _ = _solve_restricted(system, "darcy", system.coupling.T @ v_tilde)
    q_p, _ = _solve_restricted(system, "darcy", system.darcy @ p_tilde)
    return AdjointState(v_tilde.reshape(-1, 3), q_v + lam * q_p, q_v, q_p, p_tilde, float(lam))


def lagrangian(system: MacroSystem, state: MacroState, adjoint: AdjointState) -> float:
    """
    L = g(u) + lam (Psi - Psi_0) + a(u, v_tilde) - b(P, v_tilde) - g(v_tilde) + c(P, q_tilde)
    """
    u, v = state.u.ravel(), adjoint.v_tilde.ravel()
    psi = flux_functional(system, state, adjoint.p_tilde)
    return float(
        system.load @ u
        + adjoint.lam * (psi - system.data.target_flux)
        + u @ (system.stiffness @ v)
        - v @ (system.coupling @ state.P)
        - system.load @ v
        + adjoint.q_tilde @ (system.darcy @ state.P)
    )


@dataclass(frozen=True)
class ElementTensors:
    """
    Integrals over one subdomain that make F_e linear in the coefficients:
    EE[I, J] = int e(v_tilde)_I e(u)_J (engineering Voigt), PE = int P e(v_tilde),
    GPq = int grad q_tilde x grad P and GPp = int grad p_tilde x grad P.
    """

    EE: np.ndarray
    PE: np.ndarray
    GPq: np.ndarray
    GPp: np.ndarray
    lam: float

    def terms(self, h: HomCoefficients) -> Dict[str, float]:
        k_eff = np.asarray(h.K) / h.viscosity
        return {
            "stiffness": float(np.sum(np.asarray(h.A) * self.EE)),
            "coupling": float(-np.sum(h.B * self.PE)),
            "adjoint_permeability": float(np.sum(k_eff * self.GPq)),
            "flux_lift": float(-self.lam * np.sum(k_eff * self.GPp)),
        }

    def value(self, h: HomCoefficients) -> float:
        return float(sum(self.terms(h).values()))

    def permeability_share(self, h: HomCoefficients) -> float:
        t = self.terms(h)
        k = abs(t["adjoint_permeability"] + t["flux_lift"])
        total = abs(t["stiffness"]) + abs(t["coupling"]) + k
        return k / total if total > 0 else 0.0

    def gradient(self, d_a: np.ndarray, d_b: np.ndarray, d_k: np.ndarray, viscosity: float) -> np.ndarray:
        """Derivatives for stacks of coefficient derivatives (leading axis per coordinate)."""
        g = self.GPq - self.lam * self.GPp
        return (
            np.einsum("nij,ij->n", d_a, self.EE)
            - np.einsum("nij,ij->n", d_b, self.PE)
            + np.einsum("nij,ij->n", d_k, g) / viscosity
        )


def element_tensors(
    system: MacroSystem, state: MacroState, adjoint: AdjointState, elements: np.ndarray
) -> ElementTensors:
    elements = np.atleast_1d(np.asarray(elements, dtype=int))
    if len(elements) == 0:
        raise ValueError("Empty element set")
    mesh = system.mesh
    geom = element_geometry(mesh.element_coords(elements))
    hexes = mesh.hexes[elements]
    dx = geom.dx
    bm = strain_matrix(geom.gradients)
    e_u = np.einsum("eqia,ea->eqi", bm, state.u[hexes].reshape(len(elements), -1))
    e_v = np.einsum("eqia,ea->eqi", bm, adjoint.v_tilde[hexes].reshape(len(elements), -1))
    pressure = np.einsum("qa,ea->eq", geom.shape, state.P[hexes])

    def grad(values):
        return np.einsum("eqai,ea->eqi", geom.gradients, values[hexes])

    gp = grad(state.P)
    return ElementTensors(
        EE=np.einsum("eqi,eqj,eq->ij", e_v, e_u, dx),
        PE=np.einsum("eq,eqij,eq->ij", pressure, voigt_to_strain(e_v), dx),
        GPq=np.einsum("eqi,eqj,eq->ij", grad(adjoint.q_tilde), gp, dx),
        GPp=np.einsum("eqi,eqj,eq->ij", grad(adjoint.p_tilde), gp, dx),
        lam=adjoint.lam,
    )


def local_objective_F_e(
    system: MacroSystem,
    state: MacroState,
    adjoint: AdjointState,
    elements: np.ndarray,
    h: HomCoefficients,
    gradients=None,
) -> Tuple[float, Optional[np.ndarray]]:
    """
    F_e = int A e(u) : e(v_tilde) - P B : e(v_tilde) + K grad P . grad q_tilde
          - lam K grad P . grad p_tilde over the element set

    :param h: Coefficients applied on the element set
    :param gradients: Optional CoefficientGradients of h; its theta derivatives are
        appended to the design gradient when present
    :return: (F_e, gradient over the free coordinates or None)
    """
    tensors = element_tensors(system, state, adjoint, elements)
    value = tensors.value(h)
    if gradients is None:
        return value, None
    grad = tensors.gradient(gradients.A, gradients.B, gradients.K, h.viscosity)
    if gradients.theta is not None:
        t = gradients.theta
        grad = np.concatenate([grad, tensors.gradient(t["A"], t["B"], t["K"], h.viscosity)])
    return value, grad


def export_fields(
    system: MacroSystem, state: MacroState, adjoint: Optional[AdjointState], path: str
) -> None:
    mesh = system.mesh
    point_data = {"u": state.u, "P": state.P, "p_bar": state.p_bar}
    if adjoint is not None:
        point_data.update(
            {"v_tilde": adjoint.v_tilde, "q_tilde": adjoint.q_tilde, "p_tilde": adjoint.p_tilde}
        )
    out = meshio.Mesh(
        mesh.nodes,
        [("hexahedron", mesh.hexes)],
        point_data=point_data,
        cell_data={"subdomain": [mesh.subdomains]},
    )
    out.write(path, file_format="vtk", binary=False)


def lambda_sweep(
    system: MacroSystem,
    state: MacroState,
    h: HomCoefficients,
    lambdas: Sequence[float],
    elements: Optional[Sequence[int]] = None,
) -> pd.DataFrame:
    """
    Term-wise split of F_e at the coefficients h for every multiplier and element

    :param elements: Single-element subdomains to report (all elements by default)
    :return: One row per (lam, element)
    """
    elements = np.arange(system.mesh.n_elements) if elements is None else np.asarray(elements)
    rows = []
    for lam in lambdas:
        adjoint = solve_adjoint(system, state, lam)
        value = lagrangian(system, state, adjoint)
        for e in elements:
            tensors = element_tensors(system, state, adjoint, np.array([e]))
            terms = tensors.terms(h)
            rows.append(
                {
                    "lam": float(lam),
                    "element": int(e),
                    **terms,
                    "F_e": sum(terms.values()),
                    "permeability_share": tensors.permeability_share(h),
                    "lagrangian": value,
                }
            )
        logger.info(f"Lambda {lam}: Lagrangian {value:.8g}")
    return pd.DataFrame(rows)
