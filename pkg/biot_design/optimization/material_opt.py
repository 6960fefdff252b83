"""
Material design problems over the spline-box design coordinates.

Stiffness with permeability bounds (SP, SP-bis, SPX), permeability with stiffness
bounds (PS, PS-bis, PSX, PSX') and undrained compliance with drained stiffness caps (CS).
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Optional, Tuple

import numpy as np

from biot_design.fem.cell_problems import ElasticityTensor, solve_cell_problems
from biot_design.geometry.cell_mesh import (CellMesh, export_vtk, mesh_volumes,
                                            morph)
from biot_design.geometry.spline_box import (SplineBox, design_from_free,
                                             injectivity_constraints,
                                             verify_injectivity_by_sampling)
from biot_design.homogenization.coefficients import (compute_coefficients,
                                                     undrained_constants)
from biot_design.homogenization.sensitivity import chain_gradient
from biot_design.homogenization.tensors import (HomCoefficients,
                                                voigt_to_tensor)
from biot_design.optimization.slp import (NLP, Evaluation, OptimizationRecord,
                                          SLPOptions, solve_nlp)
from biot_design.resources.basics import (ConfigException, DomainException,
                                          vtk_path)
from biot_design.resources.constants import (KAPPA0, PROBLEM_KINDS,
                                             STIFFNESS_FRACTION_S0,
                                             STIFFNESS_FRACTION_S1)

logger = logging.getLogger("material_opt")

STIFFNESS_KINDS = ("SP", "SP-bis", "SPX")
PERMEABILITY_KINDS = ("PS", "PS-bis", "PSX", "PSX'")
VOLUME_KINDS = ("SP-bis", "PS-bis")


def axial_strain_modes() -> np.ndarray:
    """e^k = e_k x e_k, so that Phi_e^k(A) = A_kkkk."""
    return np.stack([np.outer(e, e) for e in np.eye(3)])


@dataclass(frozen=True)
class DesignCriteria:
    """
    Data of the design criteria. Bounds set to -inf are inactive; with relative_bounds
    kappa0/kappa1 are fractions of Psi^k(K0)/Psi(K0) and s0/s1 fractions of
    Phi_e^k(A0)/Phi_e(A0) at the initial design.
    """

    strain_modes: np.ndarray = field(default_factory=axial_strain_modes)
    directions: np.ndarray = field(default_factory=lambda: np.eye(3))
    gamma: np.ndarray = field(default_factory=lambda: np.full(3, 1.0 / 3.0))
    beta: np.ndarray = field(default_factory=lambda: np.full(3, 1.0 / 3.0))
    kappa0: float = -np.inf
    kappa1: float = -np.inf
    s0: float = -np.inf
    s1: float = -np.inf
    volume_flag: int = 0
    pore_volume0: Optional[float] = None
    stress_modes: np.ndarray = field(default_factory=axial_strain_modes)
    stress_weights: np.ndarray = field(default_factory=lambda: np.full(3, 1.0 / 3.0))
    relative_bounds: bool = False

    def __post_init__(self):
        modes = np.asarray(self.strain_modes, dtype=float)
        if modes.shape != (3, 3, 3) or not np.allclose(modes, np.swapaxes(modes, 1, 2)):
            raise ValueError("strain_modes must be three symmetric 3x3 tensors")
        if np.linalg.matrix_rank(modes.reshape(3, 9)) < 3:
            raise ValueError("strain_modes must be linearly independent")
        if abs(np.linalg.det(np.asarray(self.directions, dtype=float))) <= 1e-12:
            raise ValueError("directions g^1, g^2, g^3 must span R^3")
        if self.volume_flag not in (0, 1):
            raise ValueError(f"volume_flag must be 0 or 1, got {self.volume_flag}")
        stress = np.asarray(self.stress_modes, dtype=float)
        if stress.ndim != 3 or stress.shape[1:] != (3, 3) or len(self.stress_weights) != len(stress):
            raise ValueError("stress_modes must be (k, 3, 3) with one weight per mode")

    @classmethod
    def for_kind(cls, kind: str, **overrides) -> "DesignCriteria":
        """Default criteria of a problem kind, as used for the reference cell runs."""
        if kind not in PROBLEM_KINDS:
            raise ConfigException(f"problem.kind: unknown kind {kind}, expected one of {PROBLEM_KINDS}")
        data: Dict[str, Any] = {"volume_flag": int(kind in VOLUME_KINDS)}
        if kind in ("SP", "SP-bis"):
            data.update(kappa0=KAPPA0)
        elif kind == "SPX":
            data.update(kappa1=KAPPA0, beta=np.array([4.0, 4.0, 1.0]) / 9.0)
        elif kind in ("PS", "PS-bis"):
            data.update(s0=STIFFNESS_FRACTION_S0, relative_bounds=True)
        elif kind == "PSX":
            data.update(s1=STIFFNESS_FRACTION_S1, relative_bounds=True)
        elif kind == "PSX'":
            data.update(
                s0=STIFFNESS_FRACTION_S0,
                s1=STIFFNESS_FRACTION_S1,
                gamma=np.array([8.0, 4.0, 1.0]) / 13.0,
                relative_bounds=True,
            )
        else:
            data.update(s0=1.0, relative_bounds=True)
        data.update(overrides)
        return cls(**data)


def check_bound_pattern(kind: str, crit: DesignCriteria) -> None:
    """Raise ConfigException when the bounds do not define the requested kind."""

    def finite_positive(value):
        return np.isfinite(value) and value > 0

    if kind not in PROBLEM_KINDS:
        raise ConfigException(f"problem.kind: unknown kind {kind}")
    expected_flag = int(kind in VOLUME_KINDS)
    if crit.volume_flag != expected_flag:
        raise ConfigException(f"problem.volume_flag: {kind} needs r = {expected_flag}")
    if kind in ("SP", "SP-bis"):
        if not finite_positive(crit.kappa0):
            raise ConfigException(f"problem.kappa0: must be > 0 for {kind}")
        if np.isfinite(crit.kappa1):
            raise ConfigException(f"problem.kappa1: must be -inf for {kind}")
    elif kind == "SPX":
        if not finite_positive(crit.kappa1):
            raise ConfigException("problem.kappa1: must be > 0 for SPX")
        if np.isfinite(crit.kappa0):
            raise ConfigException("problem.kappa0: must be -inf for SPX")
    elif kind in ("PS", "PS-bis"):
        if not finite_positive(crit.s0):
            raise ConfigException(f"problem.s0: must be > 0 for {kind}")
        if np.isfinite(crit.s1):
            raise ConfigException(f"problem.s1: must be -inf for {kind}")
    elif kind == "PSX":
        if not finite_positive(crit.s1):
            raise ConfigException("problem.s1: must be > 0 for PSX")
        if np.isfinite(crit.s0):
            raise ConfigException("problem.s0: must be -inf for PSX")
    elif kind == "PSX'":
        if not (finite_positive(crit.s0) and finite_positive(crit.s1)):
            raise ConfigException("problem.s0, problem.s1: both must be > 0 for PSX'")
    else:
        if not finite_positive(crit.s0):
            raise ConfigException("problem.s0: must be > 0 for CS")
    if kind in STIFFNESS_KINDS and (np.isfinite(crit.s0) or np.isfinite(crit.s1)):
        raise ConfigException(f"problem.s0/s1: not used by {kind}")
    if kind not in STIFFNESS_KINDS and (np.isfinite(crit.kappa0) or np.isfinite(crit.kappa1)):
        raise ConfigException(f"problem.kappa0/kappa1: not used by {kind}")


def _quadratic(modes: np.ndarray, tensor: np.ndarray) -> np.ndarray:
    """Values e^k : X e^k for a Voigt-stored X, batched over leading axes of X."""
    full = voigt_to_tensor(tensor)
    return np.einsum("kij,...ijlm,klm->...k", modes, full, modes, optimize=True)


def _directional(directions: np.ndarray, k: np.ndarray) -> np.ndarray:
    return np.einsum("ki,...ij,kj->...k", directions, k, directions)


def eval_objectives(h: HomCoefficients, crit: DesignCriteria) -> Dict[str, Any]:
    """
    Scalar design criteria

    :param h: Homogenized coefficients
    :param crit: Design criteria
    :return: Phi_e_k, Phi_e, Psi_k, Psi and Phi_sigma (None when the undrained
        constants are undefined)
    """
    phi_k = _quadratic(np.asarray(crit.strain_modes), h.A)
    psi_k = _directional(np.asarray(crit.directions), h.K)
    try:
        cc = undrained_constants(h).CC
        phi_sigma = float(np.dot(crit.stress_weights, _quadratic(np.asarray(crit.stress_modes), cc)))
    except (DomainException, np.linalg.LinAlgError) as e:
        logger.debug(f"Undrained objective undefined: {e}")
        phi_sigma = None
    return {
        "Phi_e_k": phi_k,
        "Phi_e": float(np.dot(crit.gamma, phi_k)),
        "Psi_k": psi_k,
        "Psi": float(np.dot(crit.beta, psi_k)),
        "Phi_sigma": phi_sigma,
    }


def resolve_bounds(crit: DesignCriteria, h0: HomCoefficients, kind: str = "SP") -> DesignCriteria:
    """
    Turn relative bounds into absolute ones using the initial coefficients. The CS cap
    s0 is relative to the weighted stiffness Phi_e(A0).
    """
    if not crit.relative_bounds:
        return crit
    values = eval_objectives(h0, crit)

    def scaled(bound, reference):
        return bound * reference if np.isfinite(bound) else bound

    s0_reference = values["Phi_e"] if kind == "CS" else float(values["Phi_e_k"].min())
    return replace(
        crit,
        kappa0=scaled(crit.kappa0, float(values["Psi_k"].min())),
        kappa1=scaled(crit.kappa1, values["Psi"]),
        s0=scaled(crit.s0, s0_reference),
        s1=scaled(crit.s1, values["Phi_e"]),
        relative_bounds=False,
    )


class MaterialProblem:
    """
    Morph, solve, homogenize and differentiate at design points, caching the last point.
    """

    def __init__(
        self,
        kind: str,
        crit: DesignCriteria,
        box: SplineBox,
        mesh: CellMesh,
        d: ElasticityTensor,
        gamma: float = 0.0,
        viscosity: float = 1.0,
    ):
        self.kind = kind
        self.box = box
        self.mesh = mesh
        self.d = d
        self.gamma = gamma
        self.viscosity = viscosity
        self.stokes = kind != "CS"
        self._cache: Dict[bytes, Tuple[CellMesh, HomCoefficients, Any]] = {}

        check_bound_pattern(kind, crit)
        _, h0, _ = self.solve(np.zeros(box.n_shape_free))
        self.h0 = h0
        self.crit = resolve_bounds(crit, h0, kind)
        if self.crit.volume_flag and self.crit.pore_volume0 is None:
            self.crit = replace(self.crit, pore_volume0=mesh_volumes(mesh)[2])
        self.initial_values = eval_objectives(h0, self.crit)
        if kind in STIFFNESS_KINDS:
            self.scale = abs(self.initial_values["Phi_e"])
        elif kind in PERMEABILITY_KINDS:
            self.scale = abs(self.initial_values["Psi"])
        else:
            if self.initial_values["Phi_sigma"] is None:
                raise ConfigException("problem.kind: CS needs defined undrained constants")
            self.scale = abs(self.initial_values["Phi_sigma"])
        if self.scale == 0.0:
            raise ConfigException(f"problem.kind: the {kind} objective vanishes at the initial design")

    def solve(self, x: np.ndarray):
        key = np.asarray(x, dtype=float).tobytes()
        if key not in self._cache:
            design = design_from_free(self.box, x)
            mesh = morph(self.mesh, self.box, design)
            sol = solve_cell_problems(mesh, self.d, stokes=self.stokes)
            h = compute_coefficients(mesh, self.d, sol, gamma=self.gamma, viscosity=self.viscosity)
            grads = chain_gradient(self.box, mesh, self.d, sol, h, undrained=self.kind == "CS")
            self._cache = {key: (mesh, h, grads)}
        return self._cache[key]

    def evaluate(self, x: np.ndarray) -> Evaluation:
        mesh, h, grads = self.solve(x)
        crit = self.crit
        modes = np.asarray(crit.strain_modes)
        values = eval_objectives(h, crit)
        d_phi_k = _quadratic(modes, grads.A)  # (n, 3)
        d_psi_k = _directional(np.asarray(crit.directions), grads.K)

        if self.kind in STIFFNESS_KINDS:
            objective = -values["Phi_e"] / self.scale
            gradient = -(d_phi_k @ crit.gamma) / self.scale
        elif self.kind in PERMEABILITY_KINDS:
            objective = -values["Psi"] / self.scale
            gradient = -(d_psi_k @ crit.beta) / self.scale
        else:
            d_phi_sigma = _quadratic(np.asarray(crit.stress_modes), grads.CC) @ crit.stress_weights
            objective = values["Phi_sigma"] / self.scale
            gradient = d_phi_sigma / self.scale

        ineq, ineq_jac = [], []
        if np.isfinite(crit.kappa0):
            ineq += list((crit.kappa0 - values["Psi_k"]) / abs(crit.kappa0))
            ineq_jac += list(-d_psi_k.T / abs(crit.kappa0))
        if np.isfinite(crit.kappa1):
            ineq.append((crit.kappa1 - values["Psi"]) / abs(crit.kappa1))
            ineq_jac.append(-(d_psi_k @ crit.beta) / abs(crit.kappa1))
        if self.kind == "CS":
            ineq += list((values["Phi_e_k"] - crit.s0) / abs(crit.s0))
            ineq_jac += list(d_phi_k.T / abs(crit.s0))
        else:
            if np.isfinite(crit.s0):
                ineq += list((crit.s0 - values["Phi_e_k"]) / abs(crit.s0))
                ineq_jac += list(-d_phi_k.T / abs(crit.s0))
            if np.isfinite(crit.s1):
                ineq.append((crit.s1 - values["Phi_e"]) / abs(crit.s1))
                ineq_jac.append(-(d_phi_k @ crit.gamma) / abs(crit.s1))

        volume, _, fluid_volume = mesh_volumes(mesh)
        eq, eq_jac = [volume - 1.0], [grads.volume]
        if crit.volume_flag:
            eq.append((fluid_volume - crit.pore_volume0) / crit.pore_volume0)
            eq_jac.append(grads.fluid_volume / crit.pore_volume0)

        report = {
            "Phi_e": values["Phi_e"],
            "Psi": values["Psi"],
            "volume": volume,
            "fluid_volume": fluid_volume,
        }
        report.update({f"Phi_e_{k + 1}": float(v) for k, v in enumerate(values["Phi_e_k"])})
        report.update({f"Psi_{k + 1}": float(v) for k, v in enumerate(values["Psi_k"])})
        if values["Phi_sigma"] is not None:
            report["Phi_sigma"] = values["Phi_sigma"]
        return Evaluation(
            objective=float(objective),
            gradient=np.asarray(gradient, dtype=float),
            ineq=np.asarray(ineq, dtype=float),
            ineq_jacobian=np.asarray(ineq_jac, dtype=float).reshape(len(ineq), -1),
            eq=np.asarray(eq, dtype=float),
            eq_jacobian=np.asarray(eq_jac, dtype=float).reshape(len(eq), -1),
            report=report,
        )

    def labels(self) -> Tuple[list, list]:
        crit = self.crit
        ineq = []
        if np.isfinite(crit.kappa0):
            ineq += [f"kappa0_{k + 1}" for k in range(3)]
        if np.isfinite(crit.kappa1):
            ineq.append("kappa1")
        if self.kind == "CS" or np.isfinite(crit.s0):
            ineq += [f"s0_{k + 1}" for k in range(3)]
        if self.kind != "CS" and np.isfinite(crit.s1):
            ineq.append("s1")
        eq = ["volume"] + (["pore_volume"] if crit.volume_flag else [])
        return ineq, eq


def assemble_nlp(
    kind: str,
    crit: DesignCriteria,
    box: SplineBox,
    mesh: CellMesh,
    d: ElasticityTensor,
    gamma: float = 0.0,
    viscosity: float = 1.0,
) -> Tuple[NLP, MaterialProblem]:
    """
    Objective, nonlinear constraints and linear injectivity rows of one problem kind

    :param kind: One of PROBLEM_KINDS
    :param crit: Design criteria (bounds possibly relative)
    :param box: Spline box
    :param mesh: Reference cell mesh
    :param d: Solid elasticity
    :param gamma: Fluid compressibility
    :param viscosity: Fluid viscosity
    :return: The NLP and the problem that evaluates it
    """
    problem = MaterialProblem(kind, crit, box, mesh, d, gamma=gamma, viscosity=viscosity)
    ineq_labels, eq_labels = problem.labels()
    nlp = NLP(
        evaluate=problem.evaluate,
        n=box.n_shape_free,
        linear=injectivity_constraints(box),
        ineq_labels=ineq_labels,
        eq_labels=eq_labels,
    )
    logger.info(
        f"{kind}: {nlp.n} design coordinates, {len(ineq_labels)} inequality and "
        f"{len(eq_labels)} equality constraints, {nlp.linear.matrix.shape[0]} linear rows"
    )
    return nlp, problem


def optimize_material(
    kind: str,
    crit: DesignCriteria,
    box: SplineBox,
    mesh: CellMesh,
    d: ElasticityTensor,
    options: Optional[SLPOptions] = None,
    gamma: float = 0.0,
    viscosity: float = 1.0,
    snapshot_dir: Optional[str] = None,
    sampling_points: int = 0,
) -> OptimizationRecord:
    """
    Solve one material design problem from the reference design

    :param snapshot_dir: If given, a VTK snapshot of the morphed cell is written per
        accepted iterate
    :param sampling_points: If positive, the map Jacobian is sampled on an n^3 lattice at
        every accepted iterate and a nonpositive minimum is logged as a warning
    :return: OptimizationRecord with design and coefficients of the reported iterate;
        objective values in the record carry the problem's own sign
    """
    nlp, problem = assemble_nlp(kind, crit, box, mesh, d, gamma=gamma, viscosity=viscosity)

    def on_accept(iteration: int, x: np.ndarray, ev: Evaluation) -> None:
        if sampling_points > 0:
            det = verify_injectivity_by_sampling(box, design_from_free(box, x), sampling_points)
            if det <= 0.0:
                logger.warning(f"Iteration {iteration}: sampled Jacobian minimum {det:.3e}")
        if snapshot_dir is not None:
            export_vtk(problem.solve(x)[0], vtk_path(snapshot_dir, "cell", iteration))

    nlp.on_accept = on_accept
    record = solve_nlp(nlp, np.zeros(nlp.n), options)
    _, h, _ = problem.solve(record.x)
    record.design = design_from_free(box, record.x)
    record.coefficients = h
    sign = -1.0 if kind in STIFFNESS_KINDS + PERMEABILITY_KINDS else 1.0
    record.objective_scale = sign * problem.scale
    record.history["objective"] = record.objective_scale * record.history["objective"]
    return record
