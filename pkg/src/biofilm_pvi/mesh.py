"""
Conforming simplicial meshes for intervals, polygons and imported tetrahedral domains.

Meshes are immutable after construction. The constructor normalizes cell
orientation to positive volume and runs the validity checks (index range,
distinct vertices, nondegenerate cells, conformity), so every SimplicialMesh
in circulation is valid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations
from math import factorial
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from biofilm_pvi.exceptions import MeshError, MeshFormatError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MESH_FORMATS = ("text",)


def _signed_volumes(vertices: np.ndarray, cells: np.ndarray) -> np.ndarray:
    dim = cells.shape[1] - 1
    origin = vertices[cells[:, 0]]
    # columns of the affine map: p_k - p_0
    jac = np.stack([vertices[cells[:, k]] - origin for k in range(1, dim + 1)], axis=-1)
    return np.linalg.det(jac) / factorial(dim)


@dataclass(frozen=True, eq=False)
class SimplicialMesh:
    """
    Conforming simplicial mesh of dimension 1, 2 or 3.

    Attributes:
        vertices: (n_vertices, dim) coordinates
        cells: (n_cells, dim + 1) vertex indices, positively oriented
        vertex_tags: integer subdomain label per vertex (0 when untagged)
        cell_tags: integer label per cell (0 when untagged)
    """

    vertices: np.ndarray
    cells: np.ndarray
    vertex_tags: Optional[np.ndarray] = None
    cell_tags: Optional[np.ndarray] = None
    cell_volumes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        vertices = np.array(self.vertices, dtype=float)
        if vertices.ndim == 1:
            vertices = vertices[:, None]
        cells = np.array(self.cells, dtype=np.int64)
        if cells.ndim != 2 or cells.shape[0] == 0:
            raise MeshError("Mesh needs a non-empty (n_cells, dim+1) cell array")

        dim = cells.shape[1] - 1
        if dim not in (1, 2, 3):
            raise MeshError(f"Unsupported simplex dimension {dim}")
        if vertices.ndim != 2 or vertices.shape[1] != dim:
            raise MeshError(
                f"Vertices must have {dim} coordinates for {dim}-simplices, "
                f"got shape {vertices.shape}"
            )
        if not np.all(np.isfinite(vertices)):
            raise MeshError("Vertex coordinates must be finite")

        n_vertices = vertices.shape[0]
        bad = np.flatnonzero(np.any((cells < 0) | (cells >= n_vertices), axis=1))
        if bad.size:
            raise MeshError(
                f"Cell {bad[0]} references a vertex index outside [0, {n_vertices})",
                cell=int(bad[0]),
            )

        ordered = np.sort(cells, axis=1)
        repeated = np.flatnonzero(np.any(ordered[:, 1:] == ordered[:, :-1], axis=1))
        if repeated.size:
            raise MeshError(f"Cell {repeated[0]} repeats a vertex", cell=int(repeated[0]))

        volumes = _signed_volumes(vertices, cells)
        scale = float(np.ptp(vertices, axis=0).max()) or 1.0
        degenerate = np.flatnonzero(np.abs(volumes) <= 1e-13 * scale**dim)
        if degenerate.size:
            raise MeshError(
                f"Cell {degenerate[0]} has zero volume", cell=int(degenerate[0])
            )
        flipped = volumes < 0
        if np.any(flipped):
            cells[flipped, 0], cells[flipped, 1] = cells[flipped, 1], cells[flipped, 0].copy()
            volumes = np.abs(volumes)

        vertex_tags = (
            np.zeros(n_vertices, dtype=np.int64)
            if self.vertex_tags is None
            else np.asarray(self.vertex_tags, dtype=np.int64)
        )
        cell_tags = (
            np.zeros(cells.shape[0], dtype=np.int64)
            if self.cell_tags is None
            else np.asarray(self.cell_tags, dtype=np.int64)
        )
        if vertex_tags.shape != (n_vertices,):
            raise MeshError("vertex_tags must have one entry per vertex")
        if cell_tags.shape != (cells.shape[0],):
            raise MeshError("cell_tags must have one entry per cell")

        for array in (vertices, cells, vertex_tags, cell_tags, volumes):
            array.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "vertex_tags", vertex_tags)
        object.__setattr__(self, "cell_tags", cell_tags)
        object.__setattr__(self, "cell_volumes", volumes)

        self._check_conformity()

    # ------------------------------------------------------------------
    # topology
    # ------------------------------------------------------------------

    @property
    def dim(self) -> int:
        return self.cells.shape[1] - 1

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @cached_property
    def _facets(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Unique facets, their cell counts, and the facet id of every (cell, local vertex)."""
        local = [np.delete(self.cells, k, axis=1) for k in range(self.dim + 1)]
        stacked = np.sort(np.concatenate(local, axis=0), axis=1)
        facets, inverse, counts = np.unique(
            stacked, axis=0, return_inverse=True, return_counts=True
        )
        cell_facets = inverse.reshape(self.dim + 1, self.n_cells).T
        return facets, counts, cell_facets

    def _check_conformity(self) -> None:
        ordered = np.sort(self.cells, axis=1)
        _, first, counts = np.unique(ordered, axis=0, return_index=True, return_counts=True)
        if np.any(counts > 1):
            cell = int(np.sort(first[counts > 1])[0])
            raise MeshError(f"Cell {cell} is duplicated", cell=cell)

        facets, facet_counts, cell_facets = self._facets
        overfull = np.flatnonzero(facet_counts > 2)
        if overfull.size:
            cell = int(np.flatnonzero(np.any(np.isin(cell_facets, overfull), axis=1))[0])
            raise MeshError(
                f"Non-conforming mesh: cell {cell} has a facet shared by more than two cells",
                cell=cell,
            )

        self._check_hanging_vertices()

    def _check_hanging_vertices(self) -> None:
        """Reject boundary vertices lying on a boundary facet they do not belong to."""
        if self.dim == 1:
            return
        facets = self.boundary_facets
        corners = self.vertices[facets]
        scale = float(np.ptp(self.vertices, axis=0).max())
        tol = 1e-10 * scale
        low = corners.min(axis=1) - tol
        high = corners.max(axis=1) + tol
        for vertex in self.boundary_vertices:
            point = self.vertices[vertex]
            near = np.all((low <= point) & (point <= high), axis=1)
            near &= ~np.any(facets == vertex, axis=1)
            for index in np.flatnonzero(near):
                origin = corners[index, 0]
                spans = (corners[index, 1:] - origin).T
                coords = np.linalg.lstsq(spans, point - origin, rcond=None)[0]
                off_plane = np.linalg.norm(spans @ coords - (point - origin))
                inside = coords.min() >= -1e-10 and coords.sum() <= 1.0 + 1e-10
                if off_plane <= tol and inside:
                    raise MeshError(
                        f"Non-conforming mesh: vertex {int(vertex)} lies on the facet "
                        f"{facets[index].tolist()} without being one of its vertices"
                    )

    @cached_property
    def boundary_facets(self) -> np.ndarray:
        facets, counts, _ = self._facets
        return facets[counts == 1]

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        """Sorted indices of vertices lying on facets owned by a single cell."""
        return np.unique(self.boundary_facets)

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.boundary_vertices] = True
        mask.setflags(write=False)
        return mask

    @cached_property
    def edges(self) -> np.ndarray:
        pairs = [self.cells[:, [i, j]] for i, j in combinations(range(self.dim + 1), 2)]
        return np.unique(np.sort(np.concatenate(pairs, axis=0), axis=1), axis=0)

    # ------------------------------------------------------------------
    # geometry
    # ------------------------------------------------------------------

    @cached_property
    def h(self) -> float:
        """Maximum edge length over all cells."""
        edges = self.edges
        return float(
            np.linalg.norm(self.vertices[edges[:, 1]] - self.vertices[edges[:, 0]], axis=1).max()
        )

    @property
    def measure(self) -> float:
        return float(self.cell_volumes.sum())

    @property
    def diameter(self) -> float:
        """Diagonal of the bounding box, an upper bound of diam(Ω)."""
        return float(np.linalg.norm(np.ptp(self.vertices, axis=0)))

    @cached_property
    def barycenters(self) -> np.ndarray:
        return self.vertices[self.cells].mean(axis=1)

    @cached_property
    def _inverse_jacobians(self) -> np.ndarray:
        origin = self.vertices[self.cells[:, 0]]
        jac = np.stack(
            [self.vertices[self.cells[:, k]] - origin for k in range(1, self.dim + 1)], axis=-1
        )
        return np.linalg.inv(jac)

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        """(n_cells, dim+1, dim) constant gradients of the P1 hat functions on each cell."""
        inv = self._inverse_jacobians
        grads = np.empty((self.n_cells, self.dim + 1, self.dim))
        grads[:, 1:, :] = inv
        grads[:, 0, :] = -inv.sum(axis=1)
        grads.setflags(write=False)
        return grads

    def barycentric(self, points: np.ndarray, cells: np.ndarray) -> np.ndarray:
        """
        Barycentric coordinates of points[k] with respect to cell cells[k].

        Returns:
            (n_points, dim+1) array; all entries in [0, 1] iff the point lies in the cell
        """
        points = np.asarray(points, dtype=float).reshape(-1, self.dim)
        cells = np.asarray(cells, dtype=np.int64)
        origin = self.vertices[self.cells[cells, 0]]
        local = np.einsum("kij,kj->ki", self._inverse_jacobians[cells], points - origin)
        return np.concatenate([1.0 - local.sum(axis=1, keepdims=True), local], axis=1)

    def summary(self) -> str:
        return (
            f"{self.dim}D mesh: {self.n_vertices} vertices, {self.n_cells} cells, "
            f"h={self.h:.4g}, |Ω|={self.measure:.4g}"
        )


@dataclass
class MeshHierarchy:
    """
    Nested meshes where level k+1 is a uniform refinement of level k.

    parent_maps[k][c] is the level-k cell containing cell c of level k+1.
    """

    levels: List[SimplicialMesh]
    parent_maps: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.levels:
            raise MeshError("A mesh hierarchy needs at least one level")
        if len(self.parent_maps) != len(self.levels) - 1:
            raise MeshError("parent_maps must have one entry per refinement")

    @classmethod
    def from_mesh(cls, mesh: SimplicialMesh, refinements: int = 0) -> "MeshHierarchy":
        hierarchy = cls([mesh])
        hierarchy.refine(refinements)
        return hierarchy

    @property
    def finest(self) -> SimplicialMesh:
        return self.levels[-1]

    def __len__(self) -> int:
        return len(self.levels)

    def refine(self, times: int = 1) -> SimplicialMesh:
        for _ in range(times):
            fine, parents = _refine_with_parents(self.finest)
            self.levels.append(fine)
            self.parent_maps.append(parents)
        return self.finest

    def level_of(self, mesh: SimplicialMesh) -> Optional[int]:
        for index, level in enumerate(self.levels):
            if level is mesh:
                return index
        return None

    def ancestor_cells(self, level: int, target_level: int) -> np.ndarray:
        """Cell of `level` containing each cell of the finer `target_level`."""
        if not 0 <= level <= target_level < len(self.levels):
            raise MeshError(f"Invalid level pair ({level}, {target_level})")
        ancestors = np.arange(self.levels[target_level].n_cells)
        for k in range(target_level - 1, level - 1, -1):
            ancestors = self.parent_maps[k][ancestors]
        return ancestors


# ----------------------------------------------------------------------
# generators
# ----------------------------------------------------------------------


def generate_interval(a: float, b: float, n_cells: int) -> SimplicialMesh:
    """Uniform partition of (a, b) into n_cells segments."""
    if int(n_cells) != n_cells or n_cells < 1:
        raise MeshError(f"Interval needs a positive cell count, got {n_cells}")
    if not a < b:
        raise MeshError(f"Interval needs a < b, got ({a}, {b})")
    n_cells = int(n_cells)
    vertices = np.linspace(a, b, n_cells + 1)[:, None]
    cells = np.column_stack([np.arange(n_cells), np.arange(1, n_cells + 1)])
    return SimplicialMesh(vertices, cells)


def generate_rectangle(
    x_range: Tuple[float, float], y_range: Tuple[float, float], m: int
) -> SimplicialMesh:
    """
    Structured triangulation of a rectangle with m x m squares, each split
    along its (x0, y0)-(x1, y1) diagonal.

    The mesh size h is the maximal edge, i.e. the diagonal of one square
    (sqrt(2) times the grid spacing on a square domain). Red refinement of
    this mesh reproduces the structured mesh with 2m cells per side.
    """
    if int(m) != m or m < 1:
        raise MeshError(f"Rectangle needs m >= 1 cells per side, got {m}")
    (x0, x1), (y0, y1) = x_range, y_range
    if not (x0 < x1 and y0 < y1):
        raise MeshError(f"Empty rectangle {x_range} x {y_range}")
    m = int(m)
    xs, ys = np.meshgrid(np.linspace(x0, x1, m + 1), np.linspace(y0, y1, m + 1))
    vertices = np.column_stack([xs.ravel(), ys.ravel()])

    i, j = np.meshgrid(np.arange(m), np.arange(m))
    v00 = (j * (m + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + m + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    cells = np.stack([lower, upper], axis=1).reshape(-1, 3)
    return SimplicialMesh(vertices, cells)


# ----------------------------------------------------------------------
# refinement
# ----------------------------------------------------------------------


def _midpoint_tags(mesh: SimplicialMesh, edges: np.ndarray) -> np.ndarray:
    tags = mesh.vertex_tags
    left, right = tags[edges[:, 0]], tags[edges[:, 1]]
    return np.where(left == right, left, 0)


def _refine_with_parents(mesh: SimplicialMesh) -> Tuple[SimplicialMesh, np.ndarray]:
    if mesh.dim == 3:
        raise MeshError("Uniform refinement is not supported for d=3; import a refined mesh")

    n = mesh.n_vertices
    if mesh.dim == 1:
        a, b = mesh.cells[:, 0], mesh.cells[:, 1]
        mids = n + np.arange(mesh.n_cells)
        new_vertices = 0.5 * (mesh.vertices[a] + mesh.vertices[b])
        cells = np.stack([np.column_stack([a, mids]), np.column_stack([mids, b])], axis=1)
        cells = cells.reshape(-1, 2)
        parents = np.repeat(np.arange(mesh.n_cells), 2)
        new_tags = _midpoint_tags(mesh, mesh.cells)
    else:
        edges = mesh.edges
        new_vertices = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
        new_tags = _midpoint_tags(mesh, edges)

        def midpoint(p: np.ndarray, q: np.ndarray) -> np.ndarray:
            keys = np.sort(np.column_stack([p, q]), axis=1)
            # edges are sorted lexicographically, so searchsorted on a flat key finds them
            flat_edges = edges[:, 0] * n + edges[:, 1]
            return n + np.searchsorted(flat_edges, keys[:, 0] * n + keys[:, 1])

        a, b, c = mesh.cells[:, 0], mesh.cells[:, 1], mesh.cells[:, 2]
        mab, mbc, mca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        children = [
            np.column_stack([a, mab, mca]),
            np.column_stack([mab, b, mbc]),
            np.column_stack([mca, mbc, c]),
            np.column_stack([mab, mbc, mca]),
        ]
        cells = np.stack(children, axis=1).reshape(-1, 3)
        parents = np.repeat(np.arange(mesh.n_cells), 4)

    fine = SimplicialMesh(
        np.concatenate([mesh.vertices, new_vertices], axis=0),
        cells,
        vertex_tags=np.concatenate([mesh.vertex_tags, new_tags]),
        cell_tags=mesh.cell_tags[parents],
    )
    parents.setflags(write=False)
    logger.debug("Refined %s -> %s", mesh.summary(), fine.summary())
    return fine, parents


def refine_uniform(
    mesh: SimplicialMesh, hierarchy: Optional[MeshHierarchy] = None
) -> SimplicialMesh:
    """
    Bisect every segment (d=1) or red-refine every triangle into four (d=2).

    When a hierarchy whose finest level is `mesh` is given, the refined mesh
    and its parent map are appended to it.
    """
    if hierarchy is not None:
        if hierarchy.finest is not mesh:
            raise MeshError("Only the finest level of a hierarchy can be refined")
        return hierarchy.refine()
    fine, _ = _refine_with_parents(mesh)
    return fine


# ----------------------------------------------------------------------
# text format
# ----------------------------------------------------------------------


def _content_lines(path: Path):
    with open(path, "r", encoding="ascii") as handle:
        for number, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield number, line.split()


def import_mesh(path: PathLike, fmt: str = "text") -> SimplicialMesh:
    """
    Read a mesh in the whitespace-separated text format.

    Format:
        dim n_vertices n_cells
        x [y [z]] [vertex_tag]        (n_vertices lines)
        i0 i1 [i2 [i3]] [cell_tag]    (n_cells lines, 0-based)

    Blank lines and '#' comments are ignored.
    """
    if fmt not in MESH_FORMATS:
        raise MeshFormatError(f"Unknown mesh format '{fmt}', expected one of {MESH_FORMATS}")
    path = Path(path)
    if not path.exists():
        raise MeshFormatError("file not found", path=path)

    lines = _content_lines(path)
    try:
        number, header = next(lines)
    except StopIteration:
        raise MeshFormatError("empty mesh file", path=path) from None
    try:
        dim, n_vertices, n_cells = (int(token) for token in header)
    except ValueError:
        raise MeshFormatError(
            "header must be 'dim n_vertices n_cells'", path=path, line=number
        ) from None
    if dim not in (1, 2, 3) or n_vertices < 1 or n_cells < 1:
        raise MeshFormatError(f"invalid header {header}", path=path, line=number)

    vertices = np.empty((n_vertices, dim))
    vertex_tags = np.zeros(n_vertices, dtype=np.int64)
    cells = np.empty((n_cells, dim + 1), dtype=np.int64)
    cell_tags = np.zeros(n_cells, dtype=np.int64)

    try:
        for k in range(n_vertices):
            number, tokens = next(lines)
            if len(tokens) not in (dim, dim + 1):
                raise MeshFormatError(
                    f"vertex {k} needs {dim} coordinates and an optional tag",
                    path=path,
                    line=number,
                )
            vertices[k] = [float(t) for t in tokens[:dim]]
            if len(tokens) == dim + 1:
                vertex_tags[k] = int(tokens[dim])
        for k in range(n_cells):
            number, tokens = next(lines)
            if len(tokens) not in (dim + 1, dim + 2):
                raise MeshFormatError(
                    f"cell {k} needs {dim + 1} vertex indices and an optional tag",
                    path=path,
                    line=number,
                )
            cells[k] = [int(t) for t in tokens[: dim + 1]]
            if len(tokens) == dim + 2:
                cell_tags[k] = int(tokens[dim + 1])
    except StopIteration:
        raise MeshFormatError("unexpected end of file", path=path) from None
    except ValueError as exc:
        if isinstance(exc, MeshFormatError):
            raise
        raise MeshFormatError(f"malformed number ({exc})", path=path, line=number) from None

    extra = next(lines, None)
    if extra is not None:
        raise MeshFormatError("trailing data after the last cell", path=path, line=extra[0])

    mesh = SimplicialMesh(vertices, cells, vertex_tags=vertex_tags, cell_tags=cell_tags)
    logger.info("Imported %s from %s", mesh.summary(), path)
    return mesh


def write_mesh(mesh: SimplicialMesh, path: PathLike) -> Path:
    """Write a mesh in the text format read by import_mesh (tags always written)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii") as handle:
        handle.write(f"{mesh.dim} {mesh.n_vertices} {mesh.n_cells}\n")
        for coords, tag in zip(mesh.vertices, mesh.vertex_tags):
            handle.write(" ".join(f"{c:.17g}" for c in coords) + f" {tag}\n")
        for cell, tag in zip(mesh.cells, mesh.cell_tags):
            handle.write(" ".join(str(i) for i in cell) + f" {tag}\n")
    return path
