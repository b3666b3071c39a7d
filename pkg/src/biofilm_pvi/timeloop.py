"""
Time stepping over [0, T] with uniform steps.

`run` initializes the nodal interpolants, calls the step solver N_T times,
records per-step diagnostics and keeps full states only at the sample times.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from biofilm_pvi.assembly import assemble_mass, nodal_interpolate, nodal_volumes
from biofilm_pvi.config import RunConfig
from biofilm_pvi.exceptions import (
    BiofilmPVIError,
    ConfigError,
    ModelError,
    RunFailedError,
    SolverError,
)
from biofilm_pvi.mesh import MeshHierarchy, SimplicialMesh
from biofilm_pvi.model import BoundaryCondition, ModelSpec, clamp_nutrient
from biofilm_pvi.solver import (
    SystemState,
    active_mask,
    assemble_step_operators,
    build_residual,
    check_timestep_condition,
    scaled_residual_norm,
    semismooth_newton,
    solve_unconstrained_step,
)

logger = logging.getLogger(__name__)

SERIES_COLUMNS = [
    "step",
    "t",
    "total_B",
    "total_N",
    "active_nodes",
    "newton_iters",
    "residual",
    "clamp_count",
    "dn_sum",
]

ProgressCallback = Callable[[int, int], None]


@dataclass
class StepDiagnostics:
    """One row of the per-step series."""

    step: int
    t: float
    total_B: float
    total_N: float
    active_nodes: int
    newton_iters: int
    residual: float
    clamp_count: int
    dn_sum: float

    def as_row(self) -> Dict[str, float]:
        return asdict(self)


@dataclass
class Trajectory:
    """
    Result of a run: states captured at the sample times, the per-step
    diagnostics series and the active node set of every step.
    """

    mesh: SimplicialMesh
    dt: float
    model_name: str = ""
    capture_steps: List[int] = field(default_factory=list)
    states: List[SystemState] = field(default_factory=list)
    series: List[StepDiagnostics] = field(default_factory=list)
    active_sets: List[np.ndarray] = field(default_factory=list)

    def capture(self, step: int, state: SystemState) -> None:
        if self.capture_steps and step <= self.capture_steps[-1]:
            raise ValueError(f"Capture step {step} is not after {self.capture_steps[-1]}")
        self.capture_steps.append(step)
        self.states.append(state.copy())

    @property
    def sample_times(self) -> List[float]:
        return [state.t for state in self.states]

    @property
    def completed_steps(self) -> int:
        return len(self.series) - 1

    def state_at(self, t: float, tol: float = 1e-12) -> SystemState:
        """Captured state at time t (matched up to tol relative to the final time)."""
        scale = max(abs(self.series[-1].t), 1.0) if self.series else 1.0
        for state in self.states:
            if abs(state.t - t) <= tol * scale:
                return state
        raise KeyError(f"No state captured at t={t}; captured: {self.sample_times}")

    @property
    def activation_step(self) -> Optional[int]:
        for row in self.series:
            if row.active_nodes > 0:
                return row.step
        return None

    @property
    def activation_time(self) -> Optional[float]:
        """First time the constraint B = B* is active at some node."""
        step = self.activation_step
        return None if step is None else self.series[step].t

    @property
    def mean_newton_iterations(self) -> float:
        steps = self.series[1:]
        if not steps:
            return 0.0
        return float(np.mean([row.newton_iters for row in steps]))

    @property
    def clamp_total(self) -> int:
        return int(sum(row.clamp_count for row in self.series))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.as_row() for row in self.series], columns=SERIES_COLUMNS)


# ----------------------------------------------------------------------
# diagnostics
# ----------------------------------------------------------------------


def total_biomass(state: SystemState, mesh: SimplicialMesh) -> float:
    """B̄ = ∫ B_h, the row sums of the mass matrix applied to B."""
    return float(nodal_volumes(mesh) @ state.B)


def total_nutrient(state: SystemState, mesh: SimplicialMesh) -> float:
    return float(nodal_volumes(mesh) @ state.N)


def _cell_classification(mesh: SimplicialMesh, active_nodes: np.ndarray) -> np.ndarray:
    node_mask = np.zeros(mesh.n_vertices, dtype=bool)
    node_mask[active_nodes] = True
    return np.any(node_mask[mesh.cells], axis=1)


def _changed_volume(mesh: SimplicialMesh, before: np.ndarray, after: np.ndarray) -> float:
    if before.size == 0 and after.size == 0:
        return 0.0
    changed = _cell_classification(mesh, before) != _cell_classification(mesh, after)
    return float(mesh.cell_volumes[changed].sum())


@dataclass
class ActivityReport:
    """Running sum of the measure of cells whose active classification changed."""

    running_sum: np.ndarray
    plateaued: bool

    @property
    def total(self) -> float:
        return float(self.running_sum[-1]) if self.running_sum.size else 0.0


def free_boundary_activity(
    trajectory: Trajectory, plateau_fraction: float = 0.05
) -> ActivityReport:
    """
    Σ m(D_n) over the run, where D_n is the union of cells (active when any
    vertex is at B*) that switch classification between t_n and t_{n+1}.

    The sum plateaus when the last quarter of the steps adds at most
    `plateau_fraction` of the total.
    """
    mesh = trajectory.mesh
    sets = trajectory.active_sets
    increments = [0.0] + [_changed_volume(mesh, a, b) for a, b in zip(sets[:-1], sets[1:])]
    running = np.cumsum(increments)
    total = float(running[-1]) if running.size else 0.0
    if total == 0.0:
        return ActivityReport(running, True)
    quarter = max(1, len(running) // 4)
    late_growth = total - float(running[-quarter - 1]) if len(running) > quarter else total
    return ActivityReport(running, late_growth <= plateau_fraction * total)


@dataclass
class GrowthSlopes:
    """Slopes of log B̄(t) before activation and over the last quarter of the run."""

    pre_activation: float
    late: float
    activation_time: Optional[float]

    @property
    def ratio(self) -> float:
        return self.late / self.pre_activation if self.pre_activation else math.nan


def _slope(t: np.ndarray, y: np.ndarray) -> float:
    if t.size < 2:
        return math.nan
    return float(np.polyfit(t, y, 1)[0])


def growth_slopes(trajectory: Trajectory) -> GrowthSlopes:
    frame = trajectory.to_frame()
    if (frame["total_B"] <= 0).any():
        raise ValueError("log B̄ needs a positive total biomass")
    t = frame["t"].to_numpy()
    log_B = np.log(frame["total_B"].to_numpy())
    activation = trajectory.activation_step
    end = len(t) - 1 if activation is None else max(activation, 1)
    quarter = max(2, len(t) // 4)
    return GrowthSlopes(
        pre_activation=_slope(t[: end + 1], log_B[: end + 1]),
        late=_slope(t[-quarter:], log_B[-quarter:]),
        activation_time=trajectory.activation_time,
    )


# ----------------------------------------------------------------------
# initialization and stepping
# ----------------------------------------------------------------------


def initialize(model: ModelSpec, mesh: SimplicialMesh) -> SystemState:
    """
    Nodal interpolants of B_init and N_init with Lambda = 0.

    Raises:
        ModelError: if B_init violates the bounds at a node
    """
    B = nodal_interpolate(mesh, model.B_init).values.copy()
    N = nodal_interpolate(mesh, model.N_init).values.copy()
    if model.bc == BoundaryCondition.DIRICHLET_ZERO:
        boundary = mesh.boundary_vertices
        B[boundary] = 0.0
        N[boundary] = 0.0

    above = np.flatnonzero(B > model.B_upper)
    if above.size:
        node = int(above[0])
        raise ModelError(
            f"B_init={B[node]:.6g} exceeds B*={model.B_upper:g} at node {node} "
            f"(x={mesh.vertices[node].tolist()})",
            node=node,
        )
    below = np.flatnonzero(B < model.B_lower)
    if below.size:
        node = int(below[0])
        raise ModelError(
            f"B_init={B[node]:.6g} is below B_lower={model.B_lower:g} at node {node}",
            node=node,
        )
    return SystemState(B, np.zeros_like(B), N, 0.0)


def build_mesh(config: RunConfig) -> SimplicialMesh:
    """Base mesh of the config, uniformly refined `config.refinements` times."""
    mesh = config.mesh.build()
    if config.refinements:
        mesh = MeshHierarchy.from_mesh(mesh, config.refinements).finest
    return mesh


def _diagnostics(
    step: int,
    state: SystemState,
    volumes: np.ndarray,
    active: np.ndarray,
    newton_iters: int,
    residual: float,
    clamp_count: int,
    dn_sum: float,
) -> StepDiagnostics:
    return StepDiagnostics(
        step=step,
        t=state.t,
        total_B=float(volumes @ state.B),
        total_N=float(volumes @ state.N),
        active_nodes=int(active.size),
        newton_iters=newton_iters,
        residual=residual,
        clamp_count=clamp_count,
        dn_sum=dn_sum,
    )


def run(
    model: ModelSpec,
    config: RunConfig,
    mesh: Optional[SimplicialMesh] = None,
    n_steps: Optional[int] = None,
    progress: Optional[ProgressCallback] = None,
) -> Trajectory:
    """
    Integrate the system from t=0 to T.

    Args:
        model: Problem data
        config: Time step, final time, sample times and solver settings
        mesh: Mesh to use instead of building the config's mesh source
        n_steps: Stop after this many steps (defaults to T / dt)
        progress: Called as progress(step, total) after every step

    Raises:
        RunFailedError: a step failed; carries the step index and the partial trajectory
    """
    if config.unconstrained_path and model.constrained:
        raise ConfigError(
            f"unconstrained_path needs B* = inf, model '{model.name}' has "
            f"[{model.B_lower}, {model.B_upper}]"
        )
    mesh = mesh if mesh is not None else build_mesh(config)
    dt = config.time_step
    total_steps = config.n_steps if n_steps is None else min(n_steps, config.n_steps)
    sample_steps = set(config.sample_steps)
    if config.capture_initial:
        sample_steps.add(0)

    advisory = check_timestep_condition(model, mesh, dt)
    logger.info(
        "Run %s: %s, dt=%g, %d steps, mode=%s; solvability: %s",
        model.name,
        mesh.summary(),
        dt,
        total_steps,
        config.mode,
        advisory.message,
    )

    trajectory = Trajectory(mesh=mesh, dt=dt, model_name=model.name)
    state = initialize(model, mesh)
    volumes = nodal_volumes(mesh)
    mass = assemble_mass(mesh, lumped=config.lumped_mass)
    fixed = mesh.boundary_vertices if model.bc == BoundaryCondition.DIRICHLET_ZERO else None

    active = np.flatnonzero(active_mask(state, model, fixed))
    trajectory.active_sets.append(active)
    trajectory.series.append(_diagnostics(0, state, volumes, active, 0, 0.0, 0, 0.0))
    if 0 in sample_steps:
        trajectory.capture(0, state)

    dn_sum = 0.0
    clamp_warned = False
    activated = active.size > 0
    for step in range(1, total_steps + 1):
        try:
            operators = assemble_step_operators(
                mesh, model, state, dt, mode=config.mode, mass=mass
            )
            if config.unconstrained_path:
                new_state = solve_unconstrained_step(state, operators)
                new_state.t = step * dt
                iterations = 0
                residual = scaled_residual_norm(
                    build_residual(new_state, state, operators), operators
                )
            else:
                new_state, report = semismooth_newton(
                    state,
                    dt,
                    model,
                    mesh,
                    tol=config.tol,
                    max_iter=config.max_iter,
                    operators=operators,
                )
                new_state.t = step * dt
                iterations = report.iterations
                residual = report.final_residual_maxnorm
            if not new_state.is_finite():
                raise SolverError(f"non-finite values in the state at step {step}")
        except BiofilmPVIError as exc:
            logger.error("Run %s failed at step %d (t=%g): %s", model.name, step, step * dt, exc)
            raise RunFailedError(step, exc, trajectory) from exc

        _, clamp_count = clamp_nutrient(new_state.N)
        if clamp_count and not clamp_warned:
            logger.warning(
                "Negative nutrient at %d nodes (step %d); clamped to 0 in P(N)", clamp_count, step
            )
            clamp_warned = True

        new_active = np.flatnonzero(active_mask(new_state, model, fixed))
        dn_sum += _changed_volume(mesh, trajectory.active_sets[-1], new_active)
        trajectory.active_sets.append(new_active)
        trajectory.series.append(
            _diagnostics(
                step, new_state, volumes, new_active, iterations, residual, clamp_count, dn_sum
            )
        )
        if new_active.size and not activated:
            activated = True
            logger.info("Constraint active from t=%g (%d nodes)", new_state.t, new_active.size)
        if step in sample_steps:
            trajectory.capture(step, new_state)
        state = new_state
        if progress is not None:
            progress(step, total_steps)

    logger.info(
        "Run %s finished: %d steps, mean Newton iterations %.2f, clamped %d",
        model.name,
        trajectory.completed_steps,
        trajectory.mean_newton_iterations,
        trajectory.clamp_total,
    )
    return trajectory
