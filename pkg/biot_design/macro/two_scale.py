"""
Local microstructure design for selected macroscopic subdomains.

The macroscopic Lagrangian linearised at the current coefficients separates into one
functional F_e per subdomain; each F_e is minimised over the cell design of that subdomain.
"""
import logging
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp

from biot_design.fem.cell_problems import ElasticityTensor, solve_cell_problems
from biot_design.geometry.cell_mesh import CellMesh, mesh_volumes, morph
from biot_design.geometry.spline_box import (LinearConstraintSet, SplineBox,
                                             design_from_free,
                                             injectivity_constraints,
                                             rotate_coefficients)
from biot_design.homogenization.coefficients import compute_coefficients
from biot_design.homogenization.sensitivity import chain_gradient
from biot_design.homogenization.tensors import HomCoefficients
from biot_design.macro.biot_darcy import (AdjointState, MacroState,
                                          MacroSystem, element_tensors)
from biot_design.optimization.slp import (NLP, Evaluation, OptimizationRecord,
                                          SLPOptions, solve_nlp)
from biot_design.resources.constants import THETA_BOUNDS

logger = logging.getLogger("two_scale")

TERMS = ("stiffness", "coupling", "adjoint_permeability", "flux_lift")


def pad_linear_rows(linear: LinearConstraintSet, extra: int) -> LinearConstraintSet:
    """Append zero columns for coordinates the rows do not constrain."""
    rows = linear.matrix.shape[0]
    return LinearConstraintSet(
        sp.hstack([linear.matrix, sp.csr_matrix((rows, extra))]).tocsr(),
        linear.rhs,
        linear.labels,
    )


class LocalDesignProblem:
    """
    F_e as a function of (alpha-tilde, beta, theta restricted to theta_axes). The
    macroscopic tensors of the subdomain are fixed; only the cell is re-solved.
    """

    def __init__(
        self,
        system: MacroSystem,
        state: MacroState,
        adjoint: AdjointState,
        elements: Sequence[int],
        box: SplineBox,
        mesh: CellMesh,
        d: ElasticityTensor,
        gamma: float = 0.0,
        viscosity: float = 1.0,
        theta_axes: Sequence[int] = (2,),
    ):
        if any(a not in (0, 1, 2) for a in theta_axes) or len(set(theta_axes)) != len(theta_axes):
            raise ValueError(f"theta_axes must be distinct axes out of 0, 1, 2, got {theta_axes}")
        self.box = box
        self.mesh = mesh
        self.d = d
        self.gamma = gamma
        self.viscosity = viscosity
        self.theta_axes = np.asarray(theta_axes, dtype=int)
        self.elements = np.atleast_1d(np.asarray(elements, dtype=int))
        self.tensors = element_tensors(system, state, adjoint, self.elements)
        self.n_shape = box.n_shape_free
        self.n = self.n_shape + len(self.theta_axes)
        self._cache: Dict[bytes, Tuple[CellMesh, HomCoefficients, HomCoefficients, object]] = {}

        f0 = self.tensors.value(self.solve(np.zeros(self.n))[2])
        self.initial_value = f0
        self.scale = abs(f0) if f0 != 0.0 else 1.0

    def split(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        theta = np.zeros(3)
        theta[self.theta_axes] = x[self.n_shape:]
        return x[: self.n_shape], theta

    def solve(self, x: np.ndarray):
        """Morphed mesh, unrotated and rotated coefficients, and their gradients at x."""
        key = np.asarray(x, dtype=float).tobytes()
        if key not in self._cache:
            shape, theta = self.split(x)
            design = design_from_free(self.box, shape, theta)
            mesh = morph(self.mesh, self.box, design)
            sol = solve_cell_problems(mesh, self.d, stokes=True)
            h = compute_coefficients(mesh, self.d, sol, gamma=self.gamma, viscosity=self.viscosity)
            rotated = rotate_coefficients(h, theta).coefficients
            grads = chain_gradient(self.box, mesh, self.d, sol, h, theta=theta)
            self._cache = {key: (mesh, h, rotated, grads)}
        return self._cache[key]

    def evaluate(self, x: np.ndarray) -> Evaluation:
        mesh, _, rotated, grads = self.solve(x)
        t = self.tensors
        terms = t.terms(rotated)
        value = sum(terms.values())
        shape_grad = t.gradient(grads.A, grads.B, grads.K, rotated.viscosity)
        theta_grad = t.gradient(grads.theta["A"], grads.theta["B"], grads.theta["K"], rotated.viscosity)
        gradient = np.concatenate([shape_grad, theta_grad[self.theta_axes]])

        volume, _, fluid_volume = mesh_volumes(mesh)
        volume_grad = np.concatenate([grads.volume, np.zeros(len(self.theta_axes))])
        _, theta = self.split(x)
        report = {"F_e": value, **terms, "permeability_share": t.permeability_share(rotated)}
        report.update({"volume": volume, "fluid_volume": fluid_volume})
        report.update({f"theta_{k + 1}": float(theta[k]) for k in range(3)})
        return Evaluation(
            objective=value / self.scale,
            gradient=gradient / self.scale,
            eq=np.array([volume - 1.0]),
            eq_jacobian=volume_grad.reshape(1, -1),
            report=report,
        )

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        lo, hi = THETA_BOUNDS
        k = len(self.theta_axes)
        lower = np.concatenate([np.full(self.n_shape, -np.inf), np.full(k, lo)])
        upper = np.concatenate([np.full(self.n_shape, np.inf), np.full(k, hi)])
        return lower, upper


def two_scale_local_optimize(
    system: MacroSystem,
    state: MacroState,
    adjoint: AdjointState,
    elements: Sequence[int],
    box: SplineBox,
    mesh: CellMesh,
    d: ElasticityTensor,
    options: Optional[SLPOptions] = None,
    gamma: float = 0.0,
    viscosity: float = 1.0,
    theta_axes: Sequence[int] = (2,),
) -> OptimizationRecord:
    """
    Minimise F_e of one subdomain over its cell design

    :param system: Assembled macroscopic system
    :param state: Macroscopic state (u, P)
    :param adjoint: Adjoint state for the chosen multiplier
    :param elements: Macroscopic elements forming the subdomain
    :param box: Spline box of the cell
    :param mesh: Reference cell mesh
    :param d: Solid elasticity
    :param options: SLP options
    :param theta_axes: Rotation axes left free (the third axis by default)
    :return: OptimizationRecord; history holds the F_e terms per iteration, design and
        coefficients (rotated) are those of the reported iterate
    """
    problem = LocalDesignProblem(
        system, state, adjoint, elements, box, mesh, d,
        gamma=gamma, viscosity=viscosity, theta_axes=theta_axes,
    )
    lower, upper = problem.bounds()
    nlp = NLP(
        evaluate=problem.evaluate,
        n=problem.n,
        linear=pad_linear_rows(injectivity_constraints(box), len(problem.theta_axes)),
        lower=lower,
        upper=upper,
        eq_labels=["volume"],
    )
    logger.info(
        f"Subdomain {problem.elements.tolist()}, lam {adjoint.lam}: F_e {problem.initial_value:.8g} "
        f"at the reference design, {nlp.n} design coordinates"
    )
    record = solve_nlp(nlp, np.zeros(nlp.n), options)
    _, rotated = problem.solve(record.x)[1:3]
    shape, theta = problem.split(record.x)
    record.design = design_from_free(box, shape, theta)
    record.coefficients = rotated
    record.objective_scale = problem.scale
    record.history["objective"] = record.objective_scale * record.history["objective"]
    return record


def term_table(record: OptimizationRecord, element: int, lam: float) -> pd.DataFrame:
    """Per-iteration F_e decomposition of one local run."""
    columns = ["iteration", "accepted", "F_e", *TERMS, "permeability_share", "merit"]
    table = record.history[columns].copy()
    table.insert(0, "lam", lam)
    table.insert(0, "element", element)
    return table
