"""
One backward-Euler step of the constrained biofilm-nutrient system.

The discrete inequality is written as the semismooth system

    (M + dt A_B - kappa_B dt R) B - dt M Lambda - dt F_B - M B_prev = 0
    B - P_[B_lower, B_upper](B - dt Lambda)                         = 0
    (M + dt A_N) N + kappa_N dt R B - dt F_N - M N_prev              = 0

and solved by semismooth Newton with a generalized Jacobian of the Evans
projection P. Unknowns are stacked as x = [B, Lambda, N]. Since dt M Lambda is
the mass removed per step, dt Lambda is on the scale of B; any positive factor
in front of Lambda gives the same solutions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy import sparse
from scipy.sparse.linalg import splu

from biofilm_pvi.assembly import (
    SparseMatrix,
    assemble_load,
    assemble_mass,
    assemble_mass_with_quadrature_weights,
    assemble_stiffness,
    assemble_weighted_mass,
    interpolate_at_quadrature,
    nodal_volumes,
)
from biofilm_pvi.exceptions import (
    MeshMismatchError,
    ModelError,
    NewtonConvergenceError,
    SingularSystemError,
)
from biofilm_pvi.mesh import SimplicialMesh
from biofilm_pvi.model import BoundaryCondition, ModelSpec, monod_dP, monod_P

logger = logging.getLogger(__name__)

SolverMode = Literal["lagged", "implicit"]

LINEAR_RESIDUAL_CONTRACT = 1e-10
LINEAR_RESIDUAL_SINGULAR = 1e-6


@dataclass
class SystemState:
    """Nodal vectors (B, Lambda, N) at time t; Lambda <= 0 at upper-active nodes."""

    B: np.ndarray
    Lambda: np.ndarray
    N: np.ndarray
    t: float = 0.0

    def __post_init__(self) -> None:
        self.B = np.asarray(self.B, dtype=float)
        self.Lambda = np.asarray(self.Lambda, dtype=float)
        self.N = np.asarray(self.N, dtype=float)
        if not (self.B.shape == self.Lambda.shape == self.N.shape) or self.B.ndim != 1:
            raise MeshMismatchError("B, Lambda and N must be vectors of equal length")

    @property
    def size(self) -> int:
        return self.B.shape[0]

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.B, self.Lambda, self.N])

    @classmethod
    def from_stacked(cls, x: np.ndarray, t: float) -> "SystemState":
        B, Lambda, N = np.split(np.asarray(x, dtype=float), 3)
        return cls(B.copy(), Lambda.copy(), N.copy(), t)

    def copy(self) -> "SystemState":
        return SystemState(self.B.copy(), self.Lambda.copy(), self.N.copy(), self.t)

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.B))
            and np.all(np.isfinite(self.Lambda))
            and np.all(np.isfinite(self.N))
        )


class NewtonReport(BaseModel):
    """Iteration diagnostics of one semismooth Newton solve."""

    iterations: int = 0
    final_residual_maxnorm: float = math.inf
    active_node_count: int = 0
    converged: bool = False
    residual_history: List[float] = Field(default_factory=list)


# ----------------------------------------------------------------------
# Evans projection
# ----------------------------------------------------------------------


def evans_projection(psi, B_lower: float, B_upper: float):
    """max{B_lower, min(psi, B_upper)}, componentwise."""
    if not B_lower < B_upper:
        raise ModelError(f"Projection needs B_lower < B_upper, got [{B_lower}, {B_upper}]")
    projected = np.maximum(B_lower, np.minimum(psi, B_upper))
    return float(projected) if np.ndim(projected) == 0 else projected


def inactive_indicator(psi: np.ndarray, B_lower: float, B_upper: float) -> np.ndarray:
    """
    Derivative of the Evans projection chosen for Newton: 1 strictly between the
    bounds, 0 otherwise (kinks are treated as active).
    """
    return ((psi > B_lower) & (psi < B_upper)).astype(float)


# ----------------------------------------------------------------------
# step operators
# ----------------------------------------------------------------------


def growth_matrix(mesh: SimplicialMesh, model: ModelSpec, N: np.ndarray) -> SparseMatrix:
    """R = ∫ P(N_h) φ_i φ_j, or ∫ s(x) φ_i φ_j for a spatial linear reaction."""
    if model.spatial_rate is not None:
        return assemble_weighted_mass(mesh, None, None, model.spatial_rate)
    N_0 = model.monod.N_0
    return assemble_weighted_mass(mesh, N, lambda n: monod_P(n, N_0))


@dataclass
class StepOperators:
    """Matrices and load vectors of one time step (coefficients lagged at the previous level)."""

    mesh: SimplicialMesh
    model: ModelSpec
    dt: float
    M: SparseMatrix
    A_B: SparseMatrix
    A_N: SparseMatrix
    R: SparseMatrix
    F_B: np.ndarray
    F_N: np.ndarray
    fixed: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    mode: SolverMode = "lagged"

    @property
    def size(self) -> int:
        return self.mesh.n_vertices

    @property
    def reaction_is_implicit(self) -> bool:
        return self.mode == "implicit" and self.model.spatial_rate is None

    @cached_property
    def K_N(self) -> SparseMatrix:
        return (self.M + self.dt * self.A_N).tocsr()

    def reaction_matrix(self, N: np.ndarray) -> SparseMatrix:
        if self.reaction_is_implicit:
            return growth_matrix(self.mesh, self.model, N)
        return self.R

    @property
    def multiplier_scale(self) -> float:
        """Factor c in B - P(B - c Lambda)."""
        return self.dt

    @cached_property
    def residual_weights(self) -> np.ndarray:
        """
        Row scaling [m, 1, m] (m the nodal volumes) that puts every block of the
        residual in nodal units; Dirichlet rows are left unscaled.
        """
        m = nodal_volumes(self.mesh)
        weights = np.concatenate([m, np.ones_like(m), m])
        if self.fixed.size:
            q = self.size
            weights[np.concatenate([self.fixed, self.fixed + q, self.fixed + 2 * q])] = 1.0
        return weights

    def K_B(self, R: SparseMatrix) -> SparseMatrix:
        kappa_B = self.model.monod.kappa_B
        return (self.M + self.dt * self.A_B - kappa_B * self.dt * R).tocsr()


def assemble_step_operators(
    mesh: SimplicialMesh,
    model: ModelSpec,
    state_prev: SystemState,
    dt: float,
    mode: SolverMode = "lagged",
    lumped: bool = False,
    mass: Optional[SparseMatrix] = None,
) -> StepOperators:
    """Assemble M, A_B, A_N, R, F_B, F_N for the step t_prev -> t_prev + dt."""
    if state_prev.size != mesh.n_vertices:
        raise MeshMismatchError("State does not match the mesh")
    t_next = state_prev.t + dt
    M = mass if mass is not None else assemble_mass(mesh, lumped=lumped)
    A_B = assemble_stiffness(mesh, state_prev.B, model.D_B.evaluate)
    if model.scalar:
        A_N = sparse.csr_matrix((mesh.n_vertices, mesh.n_vertices))
        F_N = np.zeros(mesh.n_vertices)
    else:
        A_N = assemble_stiffness(mesh, state_prev.B, model.D_N.evaluate)
        F_N = assemble_load(mesh, model.g, t_next)
    R = growth_matrix(mesh, model, state_prev.N)
    F_B = assemble_load(mesh, model.f, t_next)
    fixed = (
        mesh.boundary_vertices
        if model.bc == BoundaryCondition.DIRICHLET_ZERO
        else np.empty(0, dtype=np.int64)
    )
    return StepOperators(mesh, model, dt, M, A_B, A_N, R, F_B, F_N, fixed, mode)


# ----------------------------------------------------------------------
# residual and Jacobian
# ----------------------------------------------------------------------


def build_residual(
    state_guess: SystemState, state_prev: SystemState, operators: StepOperators
) -> np.ndarray:
    """Stacked residual [res_B, res_C, res_N] of length 3q."""
    ops = operators
    if state_guess.size != ops.size or state_prev.size != ops.size:
        raise MeshMismatchError(
            f"State of size {state_guess.size}/{state_prev.size} for {ops.size} nodes"
        )
    B, Lambda, N = state_guess.B, state_guess.Lambda, state_guess.N
    dt = ops.dt
    monod = ops.model.monod
    R = ops.reaction_matrix(N)

    res_B = ops.K_B(R) @ B - dt * (ops.M @ Lambda) - dt * ops.F_B - ops.M @ state_prev.B
    psi = B - ops.multiplier_scale * Lambda
    res_C = B - evans_projection(psi, ops.model.B_lower, ops.model.B_upper)
    res_N = ops.K_N @ N + monod.kappa_N * dt * (R @ B) - dt * ops.F_N - ops.M @ state_prev.N

    if ops.fixed.size:
        res_B[ops.fixed] = B[ops.fixed]
        res_C[ops.fixed] = Lambda[ops.fixed]
        res_N[ops.fixed] = N[ops.fixed]
    return np.concatenate([res_B, res_C, res_N])


def _inactive_nodes(state: SystemState, ops: StepOperators) -> np.ndarray:
    psi = state.B - ops.multiplier_scale * state.Lambda
    return inactive_indicator(psi, ops.model.B_lower, ops.model.B_upper)


def _count_active(inactive: np.ndarray, ops: StepOperators) -> int:
    active = inactive == 0.0
    active[ops.fixed] = False
    return int(np.count_nonzero(active))


def _identity_rows(matrix: SparseMatrix, rows: np.ndarray) -> SparseMatrix:
    keep = np.ones(matrix.shape[0])
    keep[rows] = 0.0
    return (sparse.diags(keep) @ matrix + sparse.diags(1.0 - keep)).tocsr()


def select_jacobian(state_guess: SystemState, operators: StepOperators) -> SparseMatrix:
    """
    Element of the generalized Jacobian of build_residual at state_guess.

    Block rows (B, C, N) by columns (B, Lambda, N):
        [K_B,           -dt M,      -kappa_B dt S]
        [diag(1 - p),   c diag(p),  0            ]
        [kappa_N dt R,  0,          K_N + kappa_N dt S]
    with p the inactive indicator of B - c Lambda (c = dt) and S = ∫ P'(N_h) B_h φ_i φ_j
    present only for implicit reactions.
    """
    ops = operators
    B, Lambda, N = state_guess.B, state_guess.Lambda, state_guess.N
    dt = ops.dt
    monod = ops.model.monod
    R = ops.reaction_matrix(N)
    p = _inactive_nodes(state_guess, ops)

    BN: Optional[SparseMatrix] = None
    NN = ops.K_N
    if ops.reaction_is_implicit:
        weights = monod_dP(interpolate_at_quadrature(ops.mesh, N), monod.N_0)
        S = assemble_mass_with_quadrature_weights(
            ops.mesh, weights * interpolate_at_quadrature(ops.mesh, B)
        )
        BN = -monod.kappa_B * dt * S
        NN = NN + monod.kappa_N * dt * S

    J = sparse.bmat(
        [
            [ops.K_B(R), -dt * ops.M, BN],
            [sparse.diags(1.0 - p), sparse.diags(ops.multiplier_scale * p), None],
            [monod.kappa_N * dt * R, None, NN],
        ],
        format="csr",
    )
    if ops.fixed.size:
        q = ops.size
        J = _identity_rows(J, np.concatenate([ops.fixed, ops.fixed + q, ops.fixed + 2 * q]))
    return J


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------


def _relative_residual(J: SparseMatrix, s: np.ndarray, rhs: np.ndarray) -> float:
    scale = np.linalg.norm(rhs)
    residual = np.linalg.norm(J @ s - rhs)
    return float(residual / scale) if scale > 0 else float(residual)


def linear_solve(J: SparseMatrix, rhs: np.ndarray, iteration: Optional[int] = None) -> np.ndarray:
    """
    Sparse direct solve of J s = rhs.

    One step of iterative refinement is applied when the relative residual
    exceeds 1e-10; a residual above 1e-6 afterwards is reported as singular.
    """
    rhs = np.asarray(rhs, dtype=float)
    if J.shape[0] != J.shape[1] or J.shape[0] != rhs.shape[0]:
        raise SingularSystemError(
            f"Incompatible system: matrix {J.shape}, right-hand side {rhs.shape}", iteration
        )
    try:
        lu = splu(sparse.csc_matrix(J))
    except RuntimeError as exc:
        raise SingularSystemError(f"structurally singular Jacobian ({exc})", iteration) from exc

    s = lu.solve(rhs)
    if not np.all(np.isfinite(s)):
        raise SingularSystemError("numerically singular Jacobian", iteration)

    relative = _relative_residual(J, s, rhs)
    if relative > LINEAR_RESIDUAL_CONTRACT:
        s = s + lu.solve(rhs - J @ s)
        relative = _relative_residual(J, s, rhs)
        if relative > LINEAR_RESIDUAL_SINGULAR or not np.all(np.isfinite(s)):
            raise SingularSystemError(
                f"linear residual {relative:.2e} after refinement", iteration
            )
        if relative > LINEAR_RESIDUAL_CONTRACT:
            logger.warning("Linear solve residual %.2e above contract", relative)
    return s


# ----------------------------------------------------------------------
# Newton
# ----------------------------------------------------------------------


def active_mask(state: SystemState, model: ModelSpec, fixed: Optional[np.ndarray] = None):
    """Nodes where the constraint is active (B - Lambda at or beyond a bound)."""
    psi = state.B - state.Lambda
    mask = (psi >= model.B_upper) | (psi <= model.B_lower)
    if fixed is not None and len(fixed):
        mask[fixed] = False
    return mask


def upper_active_mask(state: SystemState, model: ModelSpec, fixed=None) -> np.ndarray:
    """Nodes held at the upper bound B*."""
    mask = (state.B - state.Lambda) >= model.B_upper
    if fixed is not None and len(fixed):
        mask[fixed] = False
    return mask


def scaled_residual_norm(residual: np.ndarray, operators: StepOperators) -> float:
    """Max-norm of the residual divided row-wise by the nodal volumes."""
    return float(np.max(np.abs(residual / operators.residual_weights)))


def _snap_to_bounds(state: SystemState, ops: StepOperators) -> SystemState:
    """
    Put the free nodes exactly onto their classification: B inside
    [B_lower, B*], Lambda = 0 where inactive and of the right sign where
    active. After a settled iteration this only removes round-off.
    """
    model = ops.model
    psi = state.B - ops.multiplier_scale * state.Lambda
    free = np.ones(ops.size, dtype=bool)
    free[ops.fixed] = False
    upper = free & (psi >= model.B_upper)
    lower = free & (psi <= model.B_lower)
    inactive = free & ~upper & ~lower
    state.B[free] = np.clip(state.B[free], model.B_lower, model.B_upper)
    state.Lambda[inactive] = 0.0
    state.Lambda[upper] = np.minimum(state.Lambda[upper], 0.0)
    state.Lambda[lower] = np.maximum(state.Lambda[lower], 0.0)
    return state


def semismooth_newton(
    state_prev: SystemState,
    dt: float,
    model: ModelSpec,
    mesh: SimplicialMesh,
    tol: float = 1e-6,
    max_iter: int = 50,
    operators: Optional[StepOperators] = None,
    mode: SolverMode = "lagged",
    lumped: bool = False,
) -> Tuple[SystemState, NewtonReport]:
    """
    Advance (B, Lambda, N) by one step with semismooth Newton.

    The iteration starts from the previous state (including its multiplier)
    and always takes at least one update. It stops when the scaled residual
    (see scaled_residual_norm) is below tol and the active set of the iterate
    is the one its update was solved with, so active nodes sit exactly on
    their bound. If the active set keeps switching at nodes on a kink while
    the residual is already below tol, the second such iterate is accepted
    and B is moved onto the bounds.

    Raises:
        NewtonConvergenceError: no convergence within max_iter updates
        SingularSystemError: the Newton system could not be solved
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    ops = operators or assemble_step_operators(mesh, model, state_prev, dt, mode, lumped)
    t_next = state_prev.t + dt
    guess = replace(state_prev.copy(), t=t_next)
    report = NewtonReport()
    solved_with: Optional[np.ndarray] = None
    small_before = False

    for k in range(max_iter + 1):
        residual = build_residual(guess, state_prev, ops)
        norm = scaled_residual_norm(residual, ops)
        inactive = _inactive_nodes(guess, ops)
        report.residual_history.append(norm)
        report.iterations = k
        report.final_residual_maxnorm = norm
        report.active_node_count = _count_active(inactive, ops)
        logger.debug(
            "t=%.6g newton %d: |F|=%.3e active=%d", t_next, k, norm, report.active_node_count
        )
        if not np.isfinite(norm):
            break
        small = norm < tol
        settled = solved_with is not None and np.array_equal(inactive, solved_with)
        if small and (settled or small_before):
            report.converged = True
            return _snap_to_bounds(guess, ops), report
        if k == max_iter:
            break
        J = select_jacobian(guess, ops)
        step = linear_solve(J, -residual, iteration=k)
        guess = SystemState.from_stacked(guess.stacked() + step, t_next)
        solved_with = inactive
        small_before = small and k > 0

    raise NewtonConvergenceError(report)


def solve_unconstrained_step(state_prev: SystemState, operators: StepOperators) -> SystemState:
    """Plain backward-Euler Galerkin step of the coupled system without a multiplier."""
    ops = operators
    dt = ops.dt
    monod = ops.model.monod
    J = sparse.bmat(
        [[ops.K_B(ops.R), None], [monod.kappa_N * dt * ops.R, ops.K_N]], format="csr"
    )
    rhs = np.concatenate(
        [dt * ops.F_B + ops.M @ state_prev.B, dt * ops.F_N + ops.M @ state_prev.N]
    )
    if ops.fixed.size:
        rows = np.concatenate([ops.fixed, ops.fixed + ops.size])
        J = _identity_rows(J, rows)
        rhs[rows] = 0.0
    B, N = np.split(linear_solve(J, rhs), 2)
    return SystemState(B, np.zeros_like(B), N, state_prev.t + dt)


# ----------------------------------------------------------------------
# diagnostics
# ----------------------------------------------------------------------


def complementarity_violation(state: SystemState, model: ModelSpec) -> float:
    """
    Largest violation of B_lower <= B <= B_upper, sign of Lambda and
    Lambda (B - bound) = 0. Zero for an exact solution.
    """
    B, Lambda = state.B, state.Lambda
    violations = [np.zeros(1)]
    if math.isfinite(model.B_upper):
        violations.append(np.maximum(B - model.B_upper, 0.0))
        upper_side = Lambda < 0
        violations.append(np.abs(Lambda * (B - model.B_upper))[upper_side])
    else:
        violations.append(np.maximum(-Lambda, 0.0))
    if math.isfinite(model.B_lower):
        violations.append(np.maximum(model.B_lower - B, 0.0))
        lower_side = Lambda > 0
        violations.append(np.abs(Lambda * (B - model.B_lower))[lower_side])
    else:
        violations.append(np.maximum(Lambda, 0.0))
    return float(max(np.max(v) if v.size else 0.0 for v in violations))


class TimestepAdvisory(BaseModel):
    """Sufficient condition for unique solvability of one time step (advisory only)."""

    gamma: float
    lipschitz: float
    poincare: float
    condition_i: bool
    dt_bound: Optional[float] = None
    dt: float
    satisfied: bool

    @property
    def message(self) -> str:
        if self.condition_i:
            return (
                f"diffusivity lower bound {self.gamma:.3g} exceeds 2 M C_PF^2 = "
                f"{2 * self.lipschitz * self.poincare**2:.3g}; any dt is admissible"
            )
        return f"dt={self.dt:.3g} {'<' if self.satisfied else '>='} bound {self.dt_bound:.3g}"


def check_timestep_condition(model: ModelSpec, mesh: SimplicialMesh, dt: float) -> TimestepAdvisory:
    """
    Evaluate the solvability condition of one step with estimated constants:
    M = max(kappa_B, kappa_N) (P <= 1) and C_PF = diam(Ω) / π.

    Either (i) gamma > 2 M C_PF^2, or (ii) dt < C_PF^2 / (2 M C_PF^2 - gamma).
    """
    laws = [model.D_B] if model.scalar else [model.D_B, model.D_N]
    gamma = min(law.bounds[0] for law in laws)
    lipschitz = max(model.monod.kappa_B, model.monod.kappa_N)
    poincare = mesh.diameter / math.pi
    threshold = 2.0 * lipschitz * poincare**2

    if gamma > threshold:
        return TimestepAdvisory(
            gamma=gamma,
            lipschitz=lipschitz,
            poincare=poincare,
            condition_i=True,
            dt=dt,
            satisfied=True,
        )
    denominator = threshold - gamma
    bound = poincare**2 / denominator if denominator > 0 else math.inf
    advisory = TimestepAdvisory(
        gamma=gamma,
        lipschitz=lipschitz,
        poincare=poincare,
        condition_i=False,
        dt_bound=bound,
        dt=dt,
        satisfied=dt < bound,
    )
    if not advisory.satisfied:
        logger.warning("Time step above the solvability bound: %s", advisory.message)
    return advisory
