"""
P1 finite element assembly on simplicial meshes.

All integrals use symmetric degree-2 quadrature (2-point Gauss in 1D, edge
midpoints in 2D, the 4-point rule in 3D), which integrates products of two
hat functions exactly. Cellwise contributions are computed for all cells at
once and reduced into CSR in a single COO pass, so the result does not depend
on evaluation order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy import sparse

from biofilm_pvi.exceptions import AssemblyError, MeshMismatchError
from biofilm_pvi.mesh import SimplicialMesh

logger = logging.getLogger(__name__)

SparseMatrix = sparse.csr_matrix
ScalarMap = Callable[[np.ndarray], np.ndarray]
SpatialFunction = Callable[[np.ndarray], np.ndarray]
SourceFunction = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class QuadratureRule:
    """Barycentric points (n_points, dim+1) and weights summing to one."""

    points: np.ndarray
    weights: np.ndarray


def _gauss_1d() -> QuadratureRule:
    s = np.array([0.5 - np.sqrt(3.0) / 6.0, 0.5 + np.sqrt(3.0) / 6.0])
    return QuadratureRule(np.column_stack([1.0 - s, s]), np.array([0.5, 0.5]))


def _edge_midpoints_2d() -> QuadratureRule:
    points = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
    return QuadratureRule(points, np.full(3, 1.0 / 3.0))


def _four_point_3d() -> QuadratureRule:
    a, b = 0.5854101966249685, 0.1381966011250105
    points = np.full((4, 4), b)
    np.fill_diagonal(points, a)
    return QuadratureRule(points, np.full(4, 0.25))


QUADRATURE = {1: _gauss_1d(), 2: _edge_midpoints_2d(), 3: _four_point_3d()}


@dataclass(frozen=True, eq=False)
class NodalField:
    """Coefficient vector of a P1 function, one value per mesh vertex."""

    values: np.ndarray
    mesh: SimplicialMesh

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float).reshape(-1)
        if values.shape[0] != self.mesh.n_vertices:
            raise MeshMismatchError(
                f"Field has {values.shape[0]} values for a mesh with "
                f"{self.mesh.n_vertices} vertices"
            )
        if not np.all(np.isfinite(values)):
            raise AssemblyError("Nodal field has non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]


FieldLike = Union[NodalField, np.ndarray]


def field_values(mesh: SimplicialMesh, field: FieldLike) -> np.ndarray:
    """Nodal values of `field`, checked against `mesh`."""
    if isinstance(field, NodalField):
        if field.mesh is not mesh:
            raise MeshMismatchError("Field is defined on a different mesh")
        return field.values
    values = np.asarray(field, dtype=float).reshape(-1)
    if values.shape[0] != mesh.n_vertices:
        raise MeshMismatchError(
            f"Vector of length {values.shape[0]} does not match {mesh.n_vertices} vertices"
        )
    return values


# ----------------------------------------------------------------------
# quadrature helpers
# ----------------------------------------------------------------------


def quadrature_points(mesh: SimplicialMesh) -> np.ndarray:
    """Physical quadrature points, shape (n_cells, n_points, dim)."""
    rule = QUADRATURE[mesh.dim]
    return np.einsum("qk,ckd->cqd", rule.points, mesh.vertices[mesh.cells])


def interpolate_at_quadrature(mesh: SimplicialMesh, field: FieldLike) -> np.ndarray:
    """Values of the P1 interpolant at the quadrature points, shape (n_cells, n_points)."""
    values = field_values(mesh, field)
    return np.einsum("ck,qk->cq", values[mesh.cells], QUADRATURE[mesh.dim].points)


def _evaluate_spatial(mesh: SimplicialMesh, function: SpatialFunction) -> np.ndarray:
    points = quadrature_points(mesh)
    flat = points.reshape(-1, mesh.dim)
    return np.asarray(function(flat), dtype=float).reshape(points.shape[:2])


def _scatter(mesh: SimplicialMesh, local: np.ndarray) -> SparseMatrix:
    n_local = mesh.dim + 1
    rows = np.repeat(mesh.cells, n_local, axis=1).ravel()
    cols = np.tile(mesh.cells, (1, n_local)).ravel()
    matrix = sparse.coo_matrix(
        (local.ravel(), (rows, cols)), shape=(mesh.n_vertices, mesh.n_vertices)
    ).tocsr()
    matrix.sum_duplicates()
    matrix.sort_indices()
    return matrix


# ----------------------------------------------------------------------
# matrices
# ----------------------------------------------------------------------


def assemble_mass_with_quadrature_weights(
    mesh: SimplicialMesh, qvalues: np.ndarray
) -> SparseMatrix:
    """Entries ∫ w(x) φ_i φ_j for w given at the quadrature points (n_cells, n_points)."""
    rule = QUADRATURE[mesh.dim]
    local = np.einsum(
        "c,q,cq,qi,qj->cij", mesh.cell_volumes, rule.weights, qvalues, rule.points, rule.points
    )
    return _scatter(mesh, local)


def assemble_mass(mesh: SimplicialMesh, lumped: bool = False) -> SparseMatrix:
    """Consistent P1 mass matrix M_ij = ∫ φ_i φ_j (diagonal row-sum lumping on request)."""
    if lumped:
        return sparse.diags(nodal_volumes(mesh), format="csr")
    ones = np.ones((mesh.n_cells, QUADRATURE[mesh.dim].weights.shape[0]))
    return assemble_mass_with_quadrature_weights(mesh, ones)


def assemble_weighted_mass(
    mesh: SimplicialMesh,
    weight: Optional[FieldLike],
    pointwise_map: Optional[ScalarMap] = None,
    spatial_rate: Optional[SpatialFunction] = None,
) -> SparseMatrix:
    """
    Weighted mass matrix ∫ map(w_h(x)) s(x) φ_i φ_j.

    Args:
        mesh: Mesh to assemble on
        weight: Nodal weight w (e.g. the lagged nutrient); its P1 interpolant is
            evaluated at the quadrature points
        pointwise_map: Map applied to w_h (identity when None)
        spatial_rate: Optional spatial factor s(x) multiplying the integrand
    """
    n_points = QUADRATURE[mesh.dim].weights.shape[0]
    if weight is None:
        qvalues = np.ones((mesh.n_cells, n_points))
    else:
        qvalues = interpolate_at_quadrature(mesh, weight)
    if pointwise_map is not None:
        qvalues = np.asarray(pointwise_map(qvalues), dtype=float) * np.ones_like(qvalues)
    if spatial_rate is not None:
        qvalues = qvalues * _evaluate_spatial(mesh, spatial_rate)
    return assemble_mass_with_quadrature_weights(mesh, qvalues)


def assemble_stiffness(
    mesh: SimplicialMesh,
    coefficient: Optional[FieldLike] = None,
    coefficient_map: Optional[ScalarMap] = None,
) -> SparseMatrix:
    """
    Variable-coefficient stiffness ∫ D(c_h(x)) ∇φ_i · ∇φ_j.

    The coefficient is evaluated at the quadrature points and averaged per
    cell with the quadrature weights; P1 gradients are cellwise constant.

    Raises:
        AssemblyError: if the mapped coefficient is negative at any quadrature point
    """
    rule = QUADRATURE[mesh.dim]
    if coefficient is None:
        qvalues = np.ones((mesh.n_cells, rule.weights.shape[0]))
    else:
        qvalues = interpolate_at_quadrature(mesh, coefficient)
    if coefficient_map is not None:
        qvalues = np.asarray(coefficient_map(qvalues), dtype=float) * np.ones_like(qvalues)

    negative = np.flatnonzero(np.any(qvalues < 0.0, axis=1))
    if negative.size:
        cell = int(negative[0])
        raise AssemblyError(
            f"Negative diffusivity {qvalues[cell].min():.3e} in cell {cell}", cell=cell
        )

    cell_coefficient = qvalues @ rule.weights
    grads = mesh.basis_gradients
    local = np.einsum("c,c,cid,cjd->cij", mesh.cell_volumes, cell_coefficient, grads, grads)
    return _scatter(mesh, local)


# ----------------------------------------------------------------------
# vectors
# ----------------------------------------------------------------------


def assemble_load(mesh: SimplicialMesh, source: SourceFunction, t: float) -> np.ndarray:
    """Load vector (F)_i = ∫ f(x, t) φ_i."""
    rule = QUADRATURE[mesh.dim]
    points = quadrature_points(mesh)
    values = np.asarray(source(points.reshape(-1, mesh.dim), t), dtype=float)
    values = (values * np.ones(points.shape[0] * points.shape[1])).reshape(points.shape[:2])
    local = np.einsum("c,q,cq,qi->ci", mesh.cell_volumes, rule.weights, values, rule.points)
    return np.bincount(mesh.cells.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)


def nodal_volumes(mesh: SimplicialMesh) -> np.ndarray:
    """∫ φ_i, equal to the row sums of the consistent mass matrix."""
    share = np.repeat(mesh.cell_volumes / (mesh.dim + 1), mesh.dim + 1)
    return np.bincount(mesh.cells.ravel(), weights=share, minlength=mesh.n_vertices)


def nodal_interpolate(mesh: SimplicialMesh, function) -> NodalField:
    """
    Nodal interpolant I_h f.

    `function` may be a number, a callable of the (n, dim) vertex array, or
    an expression exposing `at_vertices(mesh)` (needed for tag-based data).
    """
    if hasattr(function, "at_vertices"):
        values = function.at_vertices(mesh)
    elif callable(function):
        values = function(mesh.vertices)
    else:
        values = float(function)
    values = np.asarray(values, dtype=float) * np.ones(mesh.n_vertices)
    return NodalField(values, mesh)
