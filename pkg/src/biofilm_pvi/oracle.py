"""
Active-set enumeration oracle for small time steps.

For a lagged step the complementarity system is linear once every free node
is assigned a state (inactive, at B*, at B_lower). Enumerating all assignments,
solving each dense linear system and keeping the sign-consistent solutions
gives an independent reference for semismooth Newton on tiny 1D meshes.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from biofilm_pvi.exceptions import SolverError
from biofilm_pvi.mesh import SimplicialMesh, generate_interval
from biofilm_pvi.model import (
    BoundaryCondition,
    ConstantDiffusivity,
    ConstantExpression,
    ModelSpec,
    MonodSpec,
)
from biofilm_pvi.solver import (
    StepOperators,
    SystemState,
    assemble_step_operators,
    semismooth_newton,
    solve_unconstrained_step,
)

logger = logging.getLogger(__name__)

MAX_FREE_NODES = 8
FEASIBILITY_TOL = 1e-12
AGREEMENT_TOL = 1e-8

INACTIVE, UPPER, LOWER = 0, 1, 2


def enumerate_active_sets(state_prev: SystemState, operators: StepOperators) -> List[SystemState]:
    """
    All sign-consistent solutions of the lagged step, by brute force.

    Raises:
        ValueError: for more than MAX_FREE_NODES free nodes or non-lagged operators
    """
    ops = operators
    if ops.reaction_is_implicit:
        raise ValueError("Enumeration needs a lagged (linear) step")
    q = ops.size
    model = ops.model
    fixed = set(int(i) for i in ops.fixed)
    free = [i for i in range(q) if i not in fixed]
    if len(free) > MAX_FREE_NODES:
        raise ValueError(f"{len(free)} free nodes; enumeration is limited to {MAX_FREE_NODES}")

    dt = ops.dt
    M = ops.M.toarray()
    K_B = ops.K_B(ops.R).toarray()
    K_N = ops.K_N.toarray()
    R = ops.R.toarray()
    rhs_B = dt * ops.F_B + M @ state_prev.B
    rhs_N = dt * ops.F_N + M @ state_prev.N

    choices = [INACTIVE, UPPER]
    if math.isfinite(model.B_lower):
        choices.append(LOWER)
    if not math.isfinite(model.B_upper):
        choices.remove(UPPER)

    candidates = []
    for assignment in itertools.product(choices, repeat=len(free)):
        J = np.zeros((3 * q, 3 * q))
        rhs = np.zeros(3 * q)
        J[:q, :q] = K_B
        J[:q, q : 2 * q] = -dt * M
        rhs[:q] = rhs_B
        J[2 * q :, :q] = model.monod.kappa_N * dt * R
        J[2 * q :, 2 * q :] = K_N
        rhs[2 * q :] = rhs_N
        for node, choice in zip(free, assignment):
            if choice == INACTIVE:
                J[q + node, q + node] = 1.0
            else:
                J[q + node, node] = 1.0
                rhs[q + node] = model.B_upper if choice == UPPER else model.B_lower
        for node in fixed:
            for block in range(3):
                row = block * q + node
                J[row, :] = 0.0
                J[row, row] = 1.0
                rhs[row] = 0.0
        try:
            x = np.linalg.solve(J, rhs)
        except np.linalg.LinAlgError:
            continue
        B, Lambda = x[:q], x[q : 2 * q]
        if _sign_consistent(B, Lambda, free, assignment, model):
            candidates.append(SystemState.from_stacked(x, state_prev.t + dt))
    return candidates


def _sign_consistent(B, Lambda, free, assignment, model: ModelSpec) -> bool:
    for node, choice in zip(free, assignment):
        if choice == INACTIVE:
            above = B[node] > model.B_upper + FEASIBILITY_TOL
            below = B[node] < model.B_lower - FEASIBILITY_TOL
            if above or below:
                return False
        elif choice == UPPER and Lambda[node] > FEASIBILITY_TOL:
            return False
        elif choice == LOWER and Lambda[node] < -FEASIBILITY_TOL:
            return False
    return True


@dataclass
class OracleInstance:
    """A random lagged step on a tiny Dirichlet interval mesh."""

    seed: int
    model: ModelSpec
    mesh: SimplicialMesh
    state_prev: SystemState
    dt: float


def random_instance(seed: int) -> OracleInstance:
    """
    Random 1D step with 2-6 free nodes and kappa_B dt < 1. B* lies between the
    largest previous value and the largest unconstrained update, so the upper
    constraint binds whenever the unconstrained step overshoots it.
    """
    rng = np.random.default_rng(seed)
    n_cells = int(rng.integers(3, 8))
    mesh = generate_interval(0.0, 1.0, n_cells)
    kappa_B = float(rng.uniform(1.0, 40.0))
    monod = MonodSpec(
        kappa_B=kappa_B,
        kappa_N=float(rng.uniform(0.0, kappa_B)),
        N_0=float(rng.uniform(0.1, 1.0)),
    )
    dt = float(rng.uniform(0.05, 0.5)) / kappa_B
    double_obstacle = bool(rng.random() < 0.25)
    source = float(rng.uniform(-1.0, 1.0)) if double_obstacle else 0.0

    B_prev = rng.uniform(0.0, 0.05, mesh.n_vertices)
    N_prev = rng.uniform(0.1, 1.0, mesh.n_vertices)
    B_prev[mesh.boundary_vertices] = 0.0
    N_prev[mesh.boundary_vertices] = 0.0
    state_prev = SystemState(B_prev, np.zeros_like(B_prev), N_prev, 0.0)

    model = ModelSpec(
        name=f"oracle-{seed}",
        D_B=ConstantDiffusivity(value=float(rng.uniform(0.005, 0.5))),
        D_N=ConstantDiffusivity(value=float(rng.uniform(0.005, 0.5))),
        monod=monod,
        f=ConstantExpression(value=source),
        bc=BoundaryCondition.DIRICHLET_ZERO,
        B_init=ConstantExpression(value=0.0),
        N_init=ConstantExpression(value=0.0),
    )
    free_step = solve_unconstrained_step(
        state_prev, assemble_step_operators(mesh, model, state_prev, dt)
    )
    top_prev = float(B_prev.max())
    top_free = float(free_step.B.max())
    B_upper = top_prev + float(rng.uniform(0.1, 0.9)) * max(top_free - top_prev, 0.0)
    if B_upper <= top_prev:
        B_upper = top_prev + 0.01
    changes = {"B_upper": B_upper}
    if double_obstacle:
        low_free = float(free_step.B.min())
        changes["B_lower"] = min(0.0, low_free * float(rng.uniform(0.1, 0.9))) - 1e-3
    return OracleInstance(seed, model.with_updates(**changes), mesh, state_prev, dt)


@dataclass
class OracleResult:
    seed: int
    passed: bool
    max_difference: float
    worst_node: Optional[int]
    worst_field: Optional[str]
    candidates: int
    active_nodes: int

    @property
    def report(self) -> str:
        status = "ok" if self.passed else "MISMATCH"
        location = ""
        if self.worst_node is not None:
            location = f", worst at {self.worst_field}[{self.worst_node}]"
        return (
            f"seed {self.seed}: {status} (difference {self.max_difference:.2e}{location}, "
            f"{self.candidates} enumerated solutions, {self.active_nodes} active nodes)"
        )


def check_instance(instance: OracleInstance, flip_multiplier_sign: bool = False) -> OracleResult:
    """Compare semismooth Newton with enumeration on one instance."""
    ops = assemble_step_operators(instance.mesh, instance.model, instance.state_prev, instance.dt)
    try:
        newton_state, report = semismooth_newton(
            instance.state_prev,
            instance.dt,
            instance.model,
            instance.mesh,
            tol=1e-12,
            operators=ops,
        )
    except SolverError as exc:
        logger.warning("seed %d: Newton failed: %s", instance.seed, exc)
        return OracleResult(instance.seed, False, math.inf, None, None, 0, 0)
    if flip_multiplier_sign:
        newton_state.Lambda = -newton_state.Lambda

    candidates = enumerate_active_sets(instance.state_prev, ops)
    if not candidates:
        return OracleResult(instance.seed, False, math.inf, None, None, 0, report.active_node_count)

    x = newton_state.stacked()
    differences = [np.abs(x - candidate.stacked()) for candidate in candidates]
    best = min(differences, key=lambda d: float(d.max()))
    max_difference = float(best.max())
    worst = int(np.argmax(best))
    q = instance.mesh.n_vertices
    return OracleResult(
        seed=instance.seed,
        passed=max_difference <= AGREEMENT_TOL,
        max_difference=max_difference,
        worst_node=worst % q,
        worst_field=("B", "Lambda", "N")[worst // q],
        candidates=len(candidates),
        active_nodes=report.active_node_count,
    )


def run_oracle_suite(
    instances: int = 20, seed: int = 0, flip_multiplier_sign: bool = False
) -> List[OracleResult]:
    """Check `instances` random instances with seeds seed, seed+1, ..."""
    results = []
    for k in range(instances):
        result = check_instance(random_instance(seed + k), flip_multiplier_sign)
        logger.debug(result.report)
        results.append(result)
    failed = sum(not result.passed for result in results)
    logger.info("Oracle suite: %d/%d instances agree", instances - failed, instances)
    return results
