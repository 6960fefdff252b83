import json
import logging
import os
from dataclasses import dataclass, replace
from typing import Dict, Optional, Tuple

import meshio
import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from biot_design.fem.hexahedra import (FACE_CORNERS, HEX_CORNERS,
                                       corner_jacobians, element_geometry)
from biot_design.geometry.spline_box import (DesignVector, SplineBox,
                                             basis_matrix,
                                             lattice_displacements)
from biot_design.resources.basics import (MeshException,
                                          MeshGenerationException,
                                          MorphException)
from biot_design.resources.constants import (MIN_CELL_RESOLUTION,
                                             SNAP_RELAXATION_STEPS,
                                             SNAP_TOLERANCE)

logger = logging.getLogger("cell_mesh")

SOLID = 0
FLUID = 1
LABEL_NAMES = ("solid", "fluid")


@dataclass(frozen=True)
class ImplicitCellGeometry:
    """
    Cross-and-sphere pore: three cylinders along the coordinate axes through the cell
    center and a central sphere. A zero radius removes that inclusion.
    """

    channel_radii: Tuple[float, float, float] = (0.15, 0.15, 0.15)
    sphere_radius: float = 0.25

    def __post_init__(self):
        radii = list(self.channel_radii) + [self.sphere_radius]
        if len(self.channel_radii) != 3 or any(r < 0.0 or r >= 0.5 for r in radii):
            raise ValueError(f"Pore radii must lie in [0, 0.5), got {radii}")

    def pore_function(self, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Signed pore function, negative inside the fluid, and its gradient

        :param y: Points, shape (n, 3)
        :return: values (n,) and gradients (n, 3) of the active inclusion
        """
        y = np.atleast_2d(y) - 0.5
        values = np.full(len(y), np.inf)
        grads = np.zeros_like(y)
        for axis, radius in enumerate(self.channel_radii):
            if radius <= 0.0:
                continue
            radial = y.copy()
            radial[:, axis] = 0.0
            dist = np.linalg.norm(radial, axis=1)
            val = dist - radius
            active = val < values
            values[active] = val[active]
            grads[active] = radial[active] / np.maximum(dist[active], 1e-14)[:, None]
        if self.sphere_radius > 0.0:
            dist = np.linalg.norm(y, axis=1)
            val = dist - self.sphere_radius
            active = val < values
            values[active] = val[active]
            grads[active] = y[active] / np.maximum(dist[active], 1e-14)[:, None]
        return values, grads


@dataclass(frozen=True)
class CellMesh:
    """
    Periodic hexahedral mesh of the unit cell. periodic_pairs maps every node on the
    faces t_k = 1 to its master on t = 0 (edges and corners map straight to the final
    master); interface lists (solid element, local face) pairs on the solid/fluid
    interface, whose outward normal points into the fluid.
    """

    nodes: np.ndarray
    hexes: np.ndarray
    labels: np.ndarray
    periodic_pairs: np.ndarray
    preimages: np.ndarray
    interface: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.hexes)

    @property
    def master_map(self) -> np.ndarray:
        masters = np.arange(self.n_nodes)
        if len(self.periodic_pairs):
            masters[self.periodic_pairs[:, 0]] = self.periodic_pairs[:, 1]
        return masters

    @property
    def solid_elements(self) -> np.ndarray:
        return np.flatnonzero(self.labels == SOLID)

    @property
    def fluid_elements(self) -> np.ndarray:
        return np.flatnonzero(self.labels == FLUID)

    def element_coords(self, elements: Optional[np.ndarray] = None) -> np.ndarray:
        hexes = self.hexes if elements is None else self.hexes[elements]
        return self.nodes[hexes]

    def boundary_nodes(self) -> np.ndarray:
        """Nodes whose preimage lies on a face of the parameter cube."""
        t = self.preimages
        on_face = np.isclose(t, 0.0, atol=1e-12) | np.isclose(t, 1.0, atol=1e-12)
        return np.flatnonzero(on_face.any(axis=1))


def mesh_volumes(mesh: CellMesh) -> Tuple[float, float, float]:
    """(|Y|, |Y_m|, |Y_c|) by 2x2x2 Gauss quadrature."""
    geom = element_geometry(mesh.element_coords())
    vol = geom.dx.sum(axis=1)
    solid = float(vol[mesh.labels == SOLID].sum())
    fluid = float(vol[mesh.labels == FLUID].sum())
    return float(vol.sum()), solid, fluid


def _grid_neighbors(n: int) -> np.ndarray:
    """Periodic face neighbor of each structured element per local face, shape (E, 6)."""
    idx = np.indices((n, n, n)).reshape(3, -1)
    neighbors = np.empty((n ** 3, 6), dtype=int)
    for f in range(6):
        axis, side = divmod(f, 2)
        shifted = idx.copy()
        shifted[axis] = (shifted[axis] + (1 if side else -1)) % n
        neighbors[:, f] = np.ravel_multi_index(tuple(shifted), (n, n, n))
    return neighbors


def interface_facets(labels: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    solid = labels == SOLID
    mask = solid[:, None] & ~solid[neighbors]
    elements, faces = np.nonzero(mask)
    return np.stack([elements, faces], axis=1).astype(int)


def _relaxed_projection(
    nodes: np.ndarray, moved: np.ndarray, hexes: np.ndarray, masters: np.ndarray
) -> np.ndarray:
    """
    Apply master displacements, halving them on every element left with a nonpositive
    corner Jacobian until the mesh is untangled or SNAP_RELAXATION_STEPS is used up.
    """
    scale = np.ones(len(nodes))
    for step in range(SNAP_RELAXATION_STEPS + 1):
        trial = nodes + (scale[:, None] * moved)[masters]
        bad = np.flatnonzero(corner_jacobians(trial[hexes]).min(axis=1) <= 0.0)
        if not len(bad):
            if step:
                logger.warning(f"Relaxed the interface projection {step} times to untangle the mesh")
            return trial
        scale[np.unique(masters[hexes[bad]])] *= 0.5
    return trial


def generate_cross_sphere_mesh(geom: ImplicitCellGeometry, resolution: int = 16) -> CellMesh:
    """
    Structured periodic hexahedral mesh of the cross-and-sphere cell

    Elements are labeled by the sign of the pore function at their centroids; interface
    nodes within SNAP_TOLERANCE cell widths of the zero level set are projected onto it.
    Projections that tangle an element are halved on that element until it is valid.

    :param geom: Pore geometry
    :param resolution: Elements per direction
    :return: CellMesh on the unit cube
    """
    n = int(resolution)
    if n < MIN_CELL_RESOLUTION:
        raise ValueError(f"resolution must be >= {MIN_CELL_RESOLUTION}, got {n}")
    h = 1.0 / n
    shape = (n + 1,) * 3
    grid = np.indices(shape).reshape(3, -1).T
    nodes = grid * h

    cells = np.indices((n, n, n)).reshape(3, -1).T
    hexes = np.stack(
        [np.ravel_multi_index(tuple((cells + c).T), shape) for c in HEX_CORNERS], axis=1
    )
    centroids = (cells + 0.5) * h
    values, _ = geom.pore_function(centroids)
    labels = np.where(values < 0.0, FLUID, SOLID).astype(np.int8)

    master_grid = np.where(grid == n, 0, grid)
    masters = np.ravel_multi_index(tuple(master_grid.T), shape)
    slaves = np.flatnonzero(masters != np.arange(len(nodes)))
    pairs = np.stack([slaves, masters[slaves]], axis=1)

    interface = interface_facets(labels, _grid_neighbors(n))
    if len(interface):
        face_nodes = hexes[interface[:, 0][:, None], FACE_CORNERS[interface[:, 1]]]
        snap = np.unique(masters[face_nodes.ravel()])
        values, grads = geom.pore_function(nodes[snap])
        norm2 = np.einsum("ij,ij->i", grads, grads)
        close = (np.abs(values) < SNAP_TOLERANCE * h) & (norm2 > 0.0)
        disp = np.zeros((len(snap), 3))
        disp[close] = -(values[close] / norm2[close])[:, None] * grads[close]
        # master nodes on a cell face may only slide within it
        disp[grid[snap] == 0] = 0.0
        moved = np.zeros_like(nodes)
        moved[snap] = disp
        nodes = _relaxed_projection(nodes, moved, hexes, masters)
        logger.info(f"Projected {int(close.sum())} interface nodes onto the pore surface")

    mesh = CellMesh(
        nodes=nodes,
        hexes=hexes,
        labels=labels,
        periodic_pairs=pairs,
        preimages=nodes.copy(),
        interface=interface,
    )
    dets = corner_jacobians(mesh.element_coords())
    bad = np.flatnonzero(dets.min(axis=1) <= 0.0)
    if len(bad):
        raise MeshGenerationException(f"Projection tangled element {int(bad[0])}")
    _, _, fluid = mesh_volumes(mesh)
    logger.info(
        f"Generated {n}^3 cell: {len(mesh.fluid_elements)} fluid elements, "
        f"{len(interface)} interface facets, porosity {fluid:.4f}"
    )
    return mesh


def morph(mesh: CellMesh, box: SplineBox, d: DesignVector) -> CellMesh:
    """
    Move every node to the spline image of its frozen preimage

    :param mesh: Reference mesh
    :param box: Spline box
    :param d: Design vector (theta is ignored; rotation acts on coefficients)
    :return: New mesh with moved nodes
    """
    points = (box.lattice + lattice_displacements(box, d)).reshape(-1, 3)
    nodes = basis_matrix(box, mesh.preimages) @ points
    morphed = replace(mesh, nodes=nodes)
    dets = corner_jacobians(morphed.element_coords())
    bad = np.flatnonzero(dets.min(axis=1) <= 0.0)
    if len(bad):
        raise MorphException(
            f"Element {int(bad[0])} has a nonpositive Jacobian after morphing"
        )
    return morphed


def fluid_components(mesh: CellMesh) -> Tuple[int, np.ndarray]:
    """
    Connected components of the fluid elements under periodic identification

    :return: number of components and component id per fluid element
    """
    fluid = mesh.fluid_elements
    if len(fluid) == 0:
        return 0, np.zeros(0, dtype=int)
    nodes = mesh.master_map[mesh.hexes[fluid]]
    incidence = sp.coo_matrix(
        (np.ones(nodes.size), (np.repeat(np.arange(len(fluid)), 8), nodes.ravel())),
        shape=(len(fluid), mesh.n_nodes),
    ).tocsr()
    return connected_components(incidence @ incidence.T, directed=False)


def solid_components(mesh: CellMesh) -> int:
    solid = mesh.solid_elements
    if len(solid) == 0:
        return 0
    nodes = mesh.master_map[mesh.hexes[solid]]
    incidence = sp.coo_matrix(
        (np.ones(nodes.size), (np.repeat(np.arange(len(solid)), 8), nodes.ravel())),
        shape=(len(solid), mesh.n_nodes),
    ).tocsr()
    n, _ = connected_components(incidence @ incidence.T, directed=False)
    return n


def mesh_to_json(mesh: CellMesh) -> Dict:
    return {
        "nodes": mesh.nodes.tolist(),
        "hexes": mesh.hexes.tolist(),
        "labels": [LABEL_NAMES[label] for label in mesh.labels],
        "periodic_pairs": mesh.periodic_pairs.tolist(),
        "preimages": mesh.preimages.tolist(),
        "interface": mesh.interface.tolist(),
    }


def _validate(mesh: CellMesh) -> None:
    n = mesh.n_nodes
    if mesh.nodes.shape != (n, 3) or mesh.preimages.shape != (n, 3):
        raise MeshException("nodes and preimages must be (n, 3) arrays")
    if mesh.hexes.ndim != 2 or mesh.hexes.shape[1] != 8:
        raise MeshException("hexes must have 8 nodes each")
    if mesh.hexes.min() < 0 or mesh.hexes.max() >= n:
        raise MeshException("hexes reference unknown nodes")
    pairs = mesh.periodic_pairs
    if len(pairs):
        offset = mesh.preimages[pairs[:, 0]] - mesh.preimages[pairs[:, 1]]
        if not np.allclose(offset, np.round(offset), atol=1e-12) or np.any(
            np.round(offset) < 0
        ):
            raise MeshException("periodic pairs must differ by whole cell edge vectors")
    paired = set(pairs[:, 0].tolist()) | set(pairs[:, 1].tolist()) if len(pairs) else set()
    missing = [i for i in mesh.boundary_nodes() if int(i) not in paired]
    if missing:
        raise MeshException(f"boundary node {missing[0]} lacks a periodic partner")
    if len(mesh.interface) and (
        np.any(mesh.labels[mesh.interface[:, 0]] != SOLID)
        or mesh.interface[:, 1].min() < 0
        or mesh.interface[:, 1].max() > 5
    ):
        raise MeshException("interface facets must be faces of solid elements")


def ingest(path: str) -> CellMesh:
    """
    Read a JSON cell mesh

    Schema: nodes [[x, y, z]], hexes [[8 node ids, VTK order]], labels ["solid"|"fluid"],
    periodic_pairs [[slave, master]], preimages [[t1, t2, t3]], interface [[element, face]].

    :param path: Path of the JSON file
    :return: Validated CellMesh
    """
    try:
        with open(path) as f:
            data = json.load(f)
        unknown = sorted(set(data["labels"]) - set(LABEL_NAMES))
        if unknown:
            raise MeshException(f"{path}: unknown region label {unknown[0]!r}")
        mesh = CellMesh(
            nodes=np.asarray(data["nodes"], dtype=float).reshape(-1, 3),
            hexes=np.asarray(data["hexes"], dtype=int).reshape(-1, 8),
            labels=np.array([LABEL_NAMES.index(x) for x in data["labels"]], dtype=np.int8),
            periodic_pairs=np.asarray(data["periodic_pairs"], dtype=int).reshape(-1, 2),
            preimages=np.asarray(data["preimages"], dtype=float).reshape(-1, 3),
            interface=np.asarray(data["interface"], dtype=int).reshape(-1, 2),
        )
    except (OSError, KeyError, TypeError, ValueError) as e:
        raise MeshException(f"{path}: malformed mesh file ({e})") from e
    if len(mesh.labels) != mesh.n_elements:
        raise MeshException(f"{path}: one label per element required")
    _validate(mesh)
    return mesh


def export(mesh: CellMesh, path: str) -> None:
    with open(path, "w") as f:
        json.dump(mesh_to_json(mesh), f)


def export_vtk(mesh: CellMesh, path: str, point_data: Optional[Dict[str, np.ndarray]] = None) -> None:
    """
    Legacy ASCII VTK export with the region label as cell data

    :param mesh: Cell mesh
    :param path: Destination .vtk path
    :param point_data: Optional nodal fields (scalars or 3-vectors)
    :return: None
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    out = meshio.Mesh(
        mesh.nodes,
        [("hexahedron", mesh.hexes)],
        point_data=point_data or {},
        cell_data={"region": [mesh.labels.astype(np.int32)]},
    )
    meshio.write(path, out, file_format="vtk", binary=False)
