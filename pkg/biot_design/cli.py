"""
Command-line entry point: one sub-command per pipeline stage.

    python -m biot_design.cli homogenize --output_dir out/reference
    python -m biot_design.cli optimize-material --problem SP --kappa0 2e-5 --delta 0.02 --output_dir out/sp
"""
import argparse
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
import pandas as pd

from biot_design.fem.cell_problems import ElasticityTensor, solve_cell_problems
from biot_design.geometry.cell_mesh import (CellMesh, ImplicitCellGeometry,
                                            export, export_vtk,
                                            fluid_components,
                                            generate_cross_sphere_mesh, ingest,
                                            mesh_volumes, morph,
                                            solid_components)
from biot_design.geometry.spline_box import (DesignVector, SplineBox,
                                             build_box, rotate_coefficients)
from biot_design.homogenization.coefficients import (coefficients_from_record,
                                                     coefficients_to_record,
                                                     compute_coefficients,
                                                     dual_coefficients,
                                                     undrained_constants)
from biot_design.homogenization.sensitivity import (chain_gradient,
                                                    check_gradients)
from biot_design.homogenization.tensors import HomCoefficients
from biot_design.macro.biot_darcy import (MacroCoefficients, MacroData,
                                          assemble_system, boundary_flux,
                                          box_mesh, compliance, export_fields,
                                          flux_functional, lambda_sweep,
                                          solve_adjoint, solve_state)
from biot_design.macro.two_scale import term_table, two_scale_local_optimize
from biot_design.optimization.material_opt import (DesignCriteria,
                                                   check_bound_pattern,
                                                   optimize_material)
from biot_design.optimization.slp import SLPOptions, write_history
from biot_design.resources import *

logger = logging.getLogger("cli")

COMMANDS = (
    "gen-cell",
    "homogenize",
    "check-gradients",
    "optimize-material",
    "macro-solve",
    "two-scale-local",
)
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


@dataclass(frozen=True)
class CellConfig:
    channel_radii: Tuple[float, float, float] = CHANNEL_RADII
    sphere_radius: float = SPHERE_RADIUS
    resolution: int = CELL_RESOLUTION
    mesh: Optional[str] = None


@dataclass(frozen=True)
class MaterialConfig:
    young: float = YOUNG_MODULUS
    poisson: float = POISSON_RATIO
    gamma: float = FLUID_COMPRESSIBILITY
    viscosity: float = FLUID_VISCOSITY


@dataclass(frozen=True)
class BoxConfig:
    degrees: Tuple[int, int, int] = SPLINE_DEGREES
    segments: Tuple[int, int, int] = SPLINE_SEGMENTS
    delta: float = INJECTIVITY_DELTA
    path: Optional[str] = None
    design: Optional[str] = None


@dataclass(frozen=True)
class ProblemConfig:
    """Unset bounds and weights take the defaults of the problem kind."""

    kind: str = "SP"
    kappa0: Optional[float] = None
    kappa1: Optional[float] = None
    s0: Optional[float] = None
    s1: Optional[float] = None
    volume_flag: Optional[int] = None
    relative_bounds: Optional[bool] = None
    gamma_weights: Optional[Tuple[float, float, float]] = None
    beta_weights: Optional[Tuple[float, float, float]] = None

    def criteria(self) -> DesignCriteria:
        overrides: Dict[str, Any] = {
            k: getattr(self, k)
            for k in ("kappa0", "kappa1", "s0", "s1", "volume_flag", "relative_bounds")
            if getattr(self, k) is not None
        }
        if self.gamma_weights is not None:
            overrides["gamma"] = np.asarray(self.gamma_weights, dtype=float)
        if self.beta_weights is not None:
            overrides["beta"] = np.asarray(self.beta_weights, dtype=float)
        return DesignCriteria.for_kind(self.kind, **overrides)


@dataclass(frozen=True)
class SolverConfig:
    move_limit: float = MOVE_LIMIT
    min_move_limit: float = MIN_MOVE_LIMIT
    max_move_limit: float = MAX_MOVE_LIMIT
    penalty: float = MERIT_PENALTY
    max_iter: int = SLP_MAX_ITER
    tolerance: float = SLP_TOLERANCE
    sampling_points: int = 0
    snapshots: bool = False

    def options(self) -> SLPOptions:
        return SLPOptions(
            move_limit=self.move_limit,
            min_move_limit=self.min_move_limit,
            max_move_limit=self.max_move_limit,
            penalty=self.penalty,
            max_iter=self.max_iter,
            tolerance=self.tolerance,
        )


@dataclass(frozen=True)
class MacroConfig:
    shape: Tuple[int, int, int] = MACRO_SHAPE
    size: Tuple[float, float, float] = MACRO_SIZE
    pressure_1: float = PRESSURE_1
    pressure_2: float = PRESSURE_2
    traction: Tuple[float, float, float] = TRACTION
    traction_strip: float = TRACTION_STRIP
    target_flux: float = TARGET_FLUX
    lambdas: Tuple[float, ...] = tuple(LAMBDAS)
    elements: Tuple[int, ...] = ()
    theta_axes: Tuple[int, ...] = (2,)
    coefficients: Optional[str] = None


@dataclass(frozen=True)
class GradientConfig:
    coords: int = FD_COORDINATES
    steps: Tuple[float, ...] = FD_STEPS
    undrained: bool = False
    export: bool = False


SECTIONS = {
    "cell": CellConfig,
    "material": MaterialConfig,
    "box": BoxConfig,
    "problem": ProblemConfig,
    "solver": SolverConfig,
    "macro": MacroConfig,
    "gradients": GradientConfig,
}
TOP_LEVEL_KEYS = ("output_dir", "seed", "workers", "overwrite", "log_level")


def _section(cls, name: str, values: Dict[str, Any]):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigException(f"{name}.{unknown[0]}: unknown key")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in values.items()})


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigException(message)


@dataclass(frozen=True)
class RunConfig:
    command: str
    output_dir: str = "."
    seed: int = SEED
    workers: int = WORKERS
    overwrite: bool = False
    log_level: str = "INFO"
    cell: CellConfig = field(default_factory=CellConfig)
    material: MaterialConfig = field(default_factory=MaterialConfig)
    box: BoxConfig = field(default_factory=BoxConfig)
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    macro: MacroConfig = field(default_factory=MacroConfig)
    gradients: GradientConfig = field(default_factory=GradientConfig)

    @classmethod
    def from_mapping(cls, command: str, data: Dict[str, Any]) -> "RunConfig":
        """
        Build a configuration from a parsed TOML/JSON mapping

        :param command: Sub-command name
        :param data: Top-level keys plus one table per section
        :return: RunConfig (not yet validated)
        """
        top, sections = {}, {}
        for key, value in data.items():
            if key in SECTIONS:
                _require(isinstance(value, dict), f"{key}: expected a table")
                sections[key] = _section(SECTIONS[key], key, value)
            elif key in TOP_LEVEL_KEYS:
                top[key] = value
            else:
                raise ConfigException(f"{key}: unknown key")
        return cls(command=command, **top, **sections)

    def validate(self) -> None:
        """Raise ConfigException naming the first offending field."""
        _require(self.command in COMMANDS, f"command: unknown command {self.command}")
        _require(isinstance(self.seed, int) and self.seed >= 0, "seed: must be a nonnegative integer")
        _require(isinstance(self.workers, int) and self.workers >= 1, "workers: must be >= 1")
        _require(self.log_level in LOG_LEVELS, f"log_level: expected one of {LOG_LEVELS}")

        cell = self.cell
        _require(
            cell.resolution >= MIN_CELL_RESOLUTION,
            f"cell.resolution: must be >= {MIN_CELL_RESOLUTION}",
        )
        _require(len(cell.channel_radii) == 3, "cell.channel_radii: expected three radii")
        _require(
            all(0.0 <= r < 0.5 for r in (*cell.channel_radii, cell.sphere_radius)),
            "cell.channel_radii/sphere_radius: radii must lie in [0, 0.5)",
        )

        m = self.material
        _require(m.young > 0, "material.young: must be > 0")
        _require(-1.0 < m.poisson < 0.5, "material.poisson: must lie in (-1, 0.5)")
        _require(m.gamma >= 0, "material.gamma: must be >= 0")
        _require(m.viscosity > 0, "material.viscosity: must be > 0")

        _require(self.box.delta > 0, "box.delta: must be > 0")
        _require(
            len(self.box.degrees) == 3 and min(self.box.degrees) >= 1,
            "box.degrees: expected three degrees >= 1",
        )
        _require(
            len(self.box.segments) == 3 and min(self.box.segments) >= 1,
            "box.segments: expected three segment counts >= 1",
        )
        for name, path in (
            ("cell.mesh", cell.mesh),
            ("box.path", self.box.path),
            ("box.design", self.box.design),
            ("macro.coefficients", self.macro.coefficients),
        ):
            _require(path is None or os.path.exists(path), f"{name}: {path} does not exist")

        _require(
            self.problem.kind in PROBLEM_KINDS,
            f"problem.kind: unknown kind {self.problem.kind}, expected one of {PROBLEM_KINDS}",
        )
        try:
            self.problem.criteria()
            self.solver.options()
        except ValueError as e:
            raise ConfigException(f"problem/solver: {e}") from e
        if self.command == "optimize-material":
            check_bound_pattern(self.problem.kind, self.problem.criteria())
        _require(self.solver.sampling_points >= 0, "solver.sampling_points: must be >= 0")

        g = self.gradients
        _require(g.coords >= 1, "gradients.coords: must be >= 1")
        _require(len(g.steps) >= 1 and min(g.steps) > 0, "gradients.steps: must be > 0")

        mc = self.macro
        _require(len(mc.shape) == 3 and min(mc.shape) >= 1, "macro.shape: expected three counts >= 1")
        _require(len(mc.size) == 3 and min(mc.size) > 0, "macro.size: expected three lengths > 0")
        _require(len(mc.traction) == 3, "macro.traction: expected a 3-vector")
        _require(len(mc.lambdas) >= 1, "macro.lambdas: at least one multiplier required")
        n_elements = int(np.prod(mc.shape))
        _require(
            all(0 <= e < n_elements for e in mc.elements),
            f"macro.elements: element ids must lie in [0, {n_elements})",
        )
        _require(
            set(mc.theta_axes) <= {0, 1, 2} and len(set(mc.theta_axes)) == len(mc.theta_axes),
            "macro.theta_axes: distinct axes out of 0, 1, 2",
        )

        try:
            os.makedirs(self.output_dir, exist_ok=True)
        except OSError as e:
            raise ConfigException(f"output_dir: cannot create {self.output_dir} ({e})") from e
        _require(os.access(self.output_dir, os.W_OK), f"output_dir: {self.output_dir} is not writable")

    def to_json(self) -> Dict[str, Any]:
        return asdict(self)


def load_cell(config: RunConfig) -> CellMesh:
    if config.cell.mesh is not None:
        return ingest(config.cell.mesh)
    geom = ImplicitCellGeometry(tuple(config.cell.channel_radii), config.cell.sphere_radius)
    return generate_cross_sphere_mesh(geom, config.cell.resolution)


def load_box(config: RunConfig) -> SplineBox:
    if config.box.path is not None:
        return SplineBox.from_json(read_json(config.box.path))
    return build_box(config.box.degrees, config.box.segments, config.box.delta)


def load_design(config: RunConfig, box: SplineBox) -> DesignVector:
    if config.box.design is None:
        return DesignVector.zeros(box)
    try:
        design = DesignVector.from_json(read_json(config.box.design))
    except (KeyError, ValueError) as e:
        raise ConfigException(f"box.design: malformed design ({e})") from e
    _require(design.free_vector().shape == (box.n_shape_free,), "box.design: does not match the box")
    return design


def elasticity(config: RunConfig) -> ElasticityTensor:
    return ElasticityTensor.isotropic(config.material.young, config.material.poisson)


def homogenize_design(config: RunConfig, mesh: CellMesh, box: SplineBox, d: ElasticityTensor):
    """Morphed mesh, cell solution and (rotated) coefficients of the configured design."""
    design = load_design(config, box)
    cell = morph(mesh, box, design)
    sol = solve_cell_problems(cell, d, stokes=len(cell.fluid_elements) > 0)
    h = compute_coefficients(
        cell, d, sol, gamma=config.material.gamma, viscosity=config.material.viscosity
    )
    if np.any(design.theta):
        h = rotate_coefficients(h, design.theta).coefficients
    return cell, sol, h, design


def _undrained_or_none(h: HomCoefficients):
    try:
        return undrained_constants(h)
    except DomainException as e:
        logger.warning(f"Undrained constants undefined: {e}")
        return None


def reference_coefficients(config: RunConfig, mesh: CellMesh, box: SplineBox, d: ElasticityTensor) -> HomCoefficients:
    if config.macro.coefficients is None:
        return homogenize_design(config, mesh, box, d)[2]
    try:
        return coefficients_from_record(read_json(config.macro.coefficients))
    except ValueError as e:
        raise ConfigException(f"macro.coefficients: {e}") from e


def macro_problem(config: RunConfig, h: HomCoefficients):
    m = config.macro
    mesh = box_mesh(m.shape, m.size, traction_strip=(0, m.traction_strip))
    data = MacroData(m.pressure_1, m.pressure_2, tuple(m.traction), m.target_flux)
    system = assemble_system(mesh, MacroCoefficients.uniform(h, mesh.n_elements), data)
    return system, solve_state(system)


def gen_cell_stage(config: RunConfig) -> Dict[str, Any]:
    out = config.output_dir
    mesh, box = load_cell(config), load_box(config)
    export(mesh, mesh_json_path(out))
    write_json(box.to_json(), box_json_path(out))
    export_vtk(mesh, vtk_path(out, "cell"))
    volume, solid, fluid = mesh_volumes(mesh)
    n_fluid, _ = fluid_components(mesh)
    return {
        "nodes": mesh.n_nodes,
        "elements": mesh.n_elements,
        "volume": volume,
        "solid_volume": solid,
        "fluid_volume": fluid,
        "fluid_components": n_fluid,
        "solid_components": solid_components(mesh),
        "design_coordinates": box.n_shape_free,
    }


def homogenize_stage(config: RunConfig) -> Dict[str, Any]:
    out = config.output_dir
    mesh, box, d = load_cell(config), load_box(config), elasticity(config)
    cell, sol, h, design = homogenize_design(config, mesh, box, d)
    undrained = _undrained_or_none(h)
    write_json(coefficients_to_record(h, undrained), coefficients_path(out))
    if config.gradients.export:
        grads = chain_gradient(box, cell, d, sol, h, undrained=undrained is not None)
        write_json(grads.to_json(), gradients_path(out))

    dual = dual_coefficients(cell, d, sol)
    summary = {
        "phi": h.phi,
        "A_diagonal": np.diag(h.A),
        "K_diagonal": np.diag(h.K),
        "N": h.N,
        "M": h.M,
    }
    # the dual integrals are evaluated in the cell frame
    if not np.any(design.theta):
        summary["dual_difference"] = {
            "C": float(np.abs(dual["C"] - h.C).max()),
            "N": abs(dual["N"] - h.N),
            "K": float(np.abs(dual["K"] - h.K).max()),
        }
    return summary


def check_gradients_stage(config: RunConfig) -> Dict[str, Any]:
    mesh, box, d = load_cell(config), load_box(config), elasticity(config)
    rng = np.random.default_rng(config.seed)
    n = box.n_shape_free
    coordinates = np.sort(rng.choice(n, size=min(config.gradients.coords, n), replace=False))
    table = check_gradients(
        box,
        mesh,
        d,
        coordinates,
        steps=config.gradients.steps,
        gamma=config.material.gamma,
        undrained=config.gradients.undrained,
        design=load_design(config, box),
    )
    table.to_csv(gradient_check_path(config.output_dir), index=False, float_format="%.12e")
    worst = table.groupby("step")["relative_error"].max()
    return {
        "coordinates": coordinates,
        "max_relative_error": {f"{step:g}": float(error) for step, error in worst.items()},
    }


def material_run_name(kind: str) -> str:
    return "material_" + kind.replace("'", "_prime").replace("-", "_")


def optimize_material_stage(config: RunConfig) -> Dict[str, Any]:
    out = config.output_dir
    mesh, box, d = load_cell(config), load_box(config), elasticity(config)
    kind = config.problem.kind
    record = optimize_material(
        kind,
        config.problem.criteria(),
        box,
        mesh,
        d,
        options=config.solver.options(),
        gamma=config.material.gamma,
        viscosity=config.material.viscosity,
        snapshot_dir=out if config.solver.snapshots else None,
        sampling_points=config.solver.sampling_points,
    )
    write_history(record, convergence_log_path(out, material_run_name(kind)))
    write_json(record.design.to_json(), design_json_path(out))
    write_json(coefficients_to_record(record.coefficients), coefficients_path(out))
    export_vtk(morph(mesh, box, record.design), vtk_path(out, "cell"))
    return {"problem": kind, **record.summary(), "initial_report": record.initial.report}


def macro_solve_stage(config: RunConfig) -> Dict[str, Any]:
    out = config.output_dir
    mesh, box, d = load_cell(config), load_box(config), elasticity(config)
    h = reference_coefficients(config, mesh, box, d)
    system, state = macro_problem(config, h)
    elements = list(config.macro.elements) or None
    sweep = lambda_sweep(system, state, h, config.macro.lambdas, elements)
    sweep.to_csv(table_path(out, "lambda_sweep"), index=False, float_format="%.12e")
    adjoint = solve_adjoint(system, state, config.macro.lambdas[0])
    export_fields(system, state, adjoint, vtk_path(out, "macro"))
    return {
        "flux": flux_functional(system, state),
        "boundary_flux": boundary_flux(system, state),
        "compliance": compliance(system, state),
        "residuals": state.residuals,
        "lagrangian": {f"{lam:g}": float(v) for lam, v in sweep.groupby("lam")["lagrangian"].first().items()},
    }


def two_scale_stage(config: RunConfig) -> Dict[str, Any]:
    out = config.output_dir
    mesh, box, d = load_cell(config), load_box(config), elasticity(config)
    h = reference_coefficients(config, mesh, box, d)
    system, state = macro_problem(config, h)
    elements = list(config.macro.elements) or [int(system.mesh.elements_touching("pressure_1")[0])]
    adjoints = {lam: solve_adjoint(system, state, lam) for lam in config.macro.lambdas}
    pairs = [(e, lam) for lam in config.macro.lambdas for e in elements]
    options = config.solver.options()

    def local_run(pair):
        e, lam = pair
        return two_scale_local_optimize(
            system,
            state,
            adjoints[lam],
            [e],
            box,
            mesh,
            d,
            options=options,
            gamma=config.material.gamma,
            viscosity=config.material.viscosity,
            theta_axes=config.macro.theta_axes,
        )

    logger.info(f"Running {len(pairs)} local problems on {config.workers} workers")
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        records = list(pool.map(local_run, pairs))

    runs, tables = [], []
    for (e, lam), record in zip(pairs, records):
        name = f"two_scale_e{e}_lam{lam:g}"
        write_history(record, convergence_log_path(out, name))
        write_json(record.design.to_json(), design_json_path(out, f"design_e{e}_lam{lam:g}"))
        tables.append(term_table(record, e, lam))
        runs.append({"element": e, "lam": lam, **record.summary()})
    pd.concat(tables, ignore_index=True).to_csv(
        table_path(out, "two_scale_terms"), index=False, float_format="%.12e"
    )
    return {"runs": runs}


STAGES: Dict[str, Callable[[RunConfig], Dict[str, Any]]] = {
    "gen-cell": gen_cell_stage,
    "homogenize": homogenize_stage,
    "check-gradients": check_gradients_stage,
    "optimize-material": optimize_material_stage,
    "macro-solve": macro_solve_stage,
    "two-scale-local": two_scale_stage,
}


def run(config: RunConfig) -> int:
    """
    Validate the configuration, run one stage and write summary.json and timing.json

    :param config: Run configuration
    :return: Exit status (0 success, 2 config error, 3 solver failure, 4 infeasible start)
    """
    start = time.time()
    try:
        config.validate()
        if os.path.exists(summary_path(config.output_dir)) and not config.overwrite:
            raise ConfigException(f"output_dir: {config.output_dir} holds a previous run, use --overwrite")
        summary = STAGES[config.command](config)
        write_json(
            {"command": config.command, "config": config.to_json(), **summary},
            summary_path(config.output_dir),
        )
    except (ConfigException, MeshException, InfeasibleReferenceException) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG_ERROR
    except InfeasibleStartException as e:
        logger.error(f"Infeasible start: {e}")
        return EXIT_INFEASIBLE_START
    except SolverException as e:
        logger.error(f"Solver failure: {e}")
        return EXIT_SOLVER_FAILURE
    wall_time = time.time() - start
    write_json({"command": config.command, "wall_time": wall_time}, timing_path(config.output_dir))
    logger.info(f"{config.command} finished in {wall_time:.1f}s")
    return EXIT_SUCCESS


def _float_list(value: str) -> Tuple[float, ...]:
    return tuple(float(x) for x in value.split(","))


def _int_list(value: str) -> Tuple[int, ...]:
    return tuple(int(x) for x in value.split(","))


# flag -> (section, key)
FLAG_KEYS = {
    "mesh": ("cell", "mesh"),
    "resolution": ("cell", "resolution"),
    "box": ("box", "path"),
    "delta": ("box", "delta"),
    "design": ("box", "design"),
    "coords": ("gradients", "coords"),
    "undrained": ("gradients", "undrained"),
    "export_gradients": ("gradients", "export"),
    "problem": ("problem", "kind"),
    "kappa0": ("problem", "kappa0"),
    "kappa1": ("problem", "kappa1"),
    "s0": ("problem", "s0"),
    "s1": ("problem", "s1"),
    "max_iter": ("solver", "max_iter"),
    "sampling_points": ("solver", "sampling_points"),
    "snapshots": ("solver", "snapshots"),
    "lambdas": ("macro", "lambdas"),
    "elements": ("macro", "elements"),
    "coefficients": ("macro", "coefficients"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='TOML or JSON run configuration; flags override its values')
    common.add_argument('--output_dir', help='Directory receiving all artifacts (default: .)')
    common.add_argument('--seed', help='Random seed for sampled checks', type=int)
    common.add_argument('--workers', help='Worker threads for parallel stages', type=int)
    common.add_argument('--overwrite', help='Overwrite the artifacts of a previous run', action='store_true', default=None)
    common.add_argument('--log_level', help='Logging level (default: INFO)', choices=LOG_LEVELS)
    common.add_argument('--mesh', help='JSON cell mesh; generated from [cell] when omitted')
    common.add_argument('--resolution', help='Elements per edge of the generated cell', type=int)
    common.add_argument('--box', help='Spline box JSON; built from [box] when omitted')
    common.add_argument('--delta', help='Injectivity margin of the spline box', type=float)
    common.add_argument('--design', help='Design vector JSON (default: reference design)')

    parser = argparse.ArgumentParser(description='Design of periodic poroelastic microstructures')
    subparsers = parser.add_subparsers(dest='command', required=True)
    subparsers.add_parser('gen-cell', parents=[common], help='Generate the reference cell and spline box')

    homogenize = subparsers.add_parser('homogenize', parents=[common], help='Compute the homogenized coefficients')
    homogenize.add_argument('--export_gradients', help='Also write the design gradients of all coefficients', action='store_true', default=None)

    gradients = subparsers.add_parser('check-gradients', parents=[common], help='Finite difference check of the shape gradients')
    gradients.add_argument('--coords', help='Number of randomly drawn design coordinates', type=int)
    gradients.add_argument('--step', help='Smallest finite difference step; ten times the step is checked too', type=float)
    gradients.add_argument('--undrained', help='Also check the undrained compliance', action='store_true', default=None)

    material = subparsers.add_parser('optimize-material', parents=[common], help='Run one material design problem')
    material.add_argument('--problem', help='Problem kind', choices=PROBLEM_KINDS)
    material.add_argument('--kappa0', help='Lower bound on each directional permeability', type=float)
    material.add_argument('--kappa1', help='Lower bound on the weighted permeability', type=float)
    material.add_argument('--s0', help='Bound on each directional stiffness', type=float)
    material.add_argument('--s1', help='Lower bound on the weighted stiffness', type=float)
    material.add_argument('--max_iter', help='SLP iteration limit', type=int)
    material.add_argument('--sampling_points', help='Jacobian sampling lattice size per accepted iterate', type=int)
    material.add_argument('--snapshots', help='Write a VTK snapshot per accepted iterate', action='store_true', default=None)

    for name, text in (('macro-solve', 'Solve the macroscopic problem and its adjoints'),
                       ('two-scale-local', 'Local cell design for selected macroscopic elements')):
        macro = subparsers.add_parser(name, parents=[common], help=text)
        macro.add_argument('--lambdas', help='Comma-separated multipliers', type=_float_list)
        macro.add_argument('--elements', help='Comma-separated macroscopic element ids', type=_int_list)
        macro.add_argument('--coefficients', help='Coefficient JSON used on all macroscopic elements')
        if name == 'two-scale-local':
            macro.add_argument('--max_iter', help='SLP iteration limit', type=int)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    data = read_config_file(args.config) if args.config else {}
    data = {k: dict(v) if isinstance(v, dict) else v for k, v in data.items()}
    for flag, (section, key) in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            data.setdefault(section, {})[key] = value
    if getattr(args, "step", None) is not None:
        data.setdefault("gradients", {})["steps"] = (10.0 * args.step, args.step)
    for key in TOP_LEVEL_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    return RunConfig.from_mapping(args.command, data)


def main(args: argparse.Namespace) -> int:
    logging.basicConfig(format="%(levelname)s (%(name)s %(lineno)s): %(message)s")
    try:
        config = config_from_args(args)
    except (ConfigException, TypeError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG_ERROR
    logging.getLogger().setLevel(config.log_level if config.log_level in LOG_LEVELS else "INFO")
    return run(config)


if __name__ == "__main__":
    sys.exit(main(build_parser().parse_args()))
