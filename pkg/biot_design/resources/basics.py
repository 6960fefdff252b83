import json
import os
import sys
from typing import Any, Dict, Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class BiotDesignException(Exception):
    pass


class ConfigException(BiotDesignException):
    pass


class MeshException(BiotDesignException):
    pass


class MeshGenerationException(MeshException):
    pass


class MorphException(MeshException):
    pass


class InfeasibleReferenceException(BiotDesignException):
    pass


class SolverException(BiotDesignException):
    pass


class DomainException(SolverException):
    pass


class InfeasibleStartException(BiotDesignException):
    pass


def coefficients_path(output_dir: str) -> str:
    return os.path.join(output_dir, "coefficients.json")


def gradients_path(output_dir: str) -> str:
    return os.path.join(output_dir, "gradients.json")


def gradient_check_path(output_dir: str) -> str:
    return os.path.join(output_dir, "gradient_check.csv")


def mesh_json_path(output_dir: str, name: str = "cell") -> str:
    return os.path.join(output_dir, f"{name}_mesh.json")


def box_json_path(output_dir: str) -> str:
    return os.path.join(output_dir, "spline_box.json")


def design_json_path(output_dir: str, name: str = "design") -> str:
    return os.path.join(output_dir, f"{name}.json")


def vtk_path(output_dir: str, name: str, iteration: Optional[int] = None) -> str:
    """
    Path of a legacy VTK file in the output directory

    :param output_dir: Output directory of the run
    :param name: Artifact name (cell, macro, ...)
    :param iteration: Optional optimizer iteration for geometry snapshots
    :return: Path of the VTK file
    """
    if iteration is None:
        return os.path.join(output_dir, f"{name}.vtk")
    return os.path.join(output_dir, "snapshots", f"{name}_{iteration:04d}.vtk")


def convergence_log_path(output_dir: str, name: str) -> str:
    return os.path.join(output_dir, f"{name}_convergence.csv")


def table_path(output_dir: str, name: str) -> str:
    return os.path.join(output_dir, f"{name}.csv")


def summary_path(output_dir: str) -> str:
    return os.path.join(output_dir, "summary.json")


def timing_path(output_dir: str) -> str:
    return os.path.join(output_dir, "timing.json")


def _to_builtin(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, dict):
        return {str(k): _to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_builtin(v) for v in value]
    return value


def write_json(data: Dict[str, Any], path: str, overwrite: bool = True) -> None:
    """
    Write a JSON artifact with sorted keys so that identical inputs give identical bytes

    :param data: JSON-serializable mapping (numpy arrays are converted to lists)
    :param path: Destination path
    :param overwrite: Whether an existing file may be replaced
    :return: None
    """
    if os.path.exists(path) and not overwrite:
        raise ConfigException(f"output: {path} exists, use --overwrite")
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w") as f:
        json.dump(_to_builtin(data), f, indent=1, sort_keys=True)
        f.write("\n")


def read_json(path: str) -> Dict[str, Any]:
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigException(f"{path}: cannot read JSON ({e})") from e


def read_config_file(path: str) -> Dict[str, Any]:
    """
    Read a run configuration; TOML and JSON share one schema

    :param path: Path ending in .toml or .json
    :return: Nested configuration mapping
    """
    if not os.path.exists(path):
        raise ConfigException(f"config: {path} does not exist")
    if path.endswith(".json"):
        return read_json(path)
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigException(f"config: {path} is not valid TOML ({e})") from e
