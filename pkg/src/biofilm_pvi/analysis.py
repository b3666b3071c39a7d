"""
Error measurement against fine-grid surrogate solutions and observed
convergence orders.

Coarse solutions are prolongated exactly onto the fine level of a nested
MeshHierarchy, so every norm is a quadratic form of fine-level matrices.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from biofilm_pvi.assembly import (
    FieldLike,
    NodalField,
    SparseMatrix,
    assemble_mass,
    assemble_stiffness,
    field_values,
)
from biofilm_pvi.config import RunConfig, Settings, StudyConfig, build_run_config
from biofilm_pvi.exceptions import (
    BiofilmPVIError,
    ConvergenceStudyError,
    NonNestedMeshError,
)
from biofilm_pvi.experiments import builtin_study
from biofilm_pvi.mesh import MeshHierarchy, SimplicialMesh
from biofilm_pvi.model import ModelSpec
from biofilm_pvi.timeloop import Trajectory, run

logger = logging.getLogger(__name__)

CONVERGENCE_COLUMNS = ["h", "dt", "err1", "err2", "order1", "order2"]

APPENDIX_EXPERIMENTS = {"scalar_pvi": "appendix_A1", "unconstrained": "appendix_A2"}


# ----------------------------------------------------------------------
# prolongation and norms
# ----------------------------------------------------------------------


def _vertex_cells(mesh: SimplicialMesh) -> np.ndarray:
    """One cell containing each vertex."""
    owner = np.empty(mesh.n_vertices, dtype=np.int64)
    owner[mesh.cells.ravel()] = np.repeat(np.arange(mesh.n_cells), mesh.dim + 1)
    return owner


def prolongate(
    values: np.ndarray, hierarchy: MeshHierarchy, level: int, target_level: int
) -> np.ndarray:
    """
    Nodal values on `target_level` of the P1 function given on `level`.

    Each fine vertex is located in its ancestor cell and the coarse interpolant
    is evaluated there with barycentric coordinates.
    """
    coarse = hierarchy.levels[level]
    values = field_values(coarse, values)
    if level == target_level:
        return values.copy()
    fine = hierarchy.levels[target_level]
    ancestors = hierarchy.ancestor_cells(level, target_level)
    coarse_cells = ancestors[_vertex_cells(fine)]
    weights = coarse.barycentric(fine.vertices, coarse_cells)
    return np.einsum("vk,vk->v", weights, values[coarse.cells[coarse_cells]])


def transfer_to_fine(
    coarse_field: NodalField, hierarchy: MeshHierarchy, target_level: int
) -> NodalField:
    """
    Exact prolongation of a coarse field to a finer level of the same hierarchy.

    Raises:
        NonNestedMeshError: if the field's mesh is not a coarser level of `hierarchy`
    """
    level = hierarchy.level_of(coarse_field.mesh)
    if level is None:
        raise NonNestedMeshError("Field mesh is not a level of the hierarchy")
    if not 0 <= target_level < len(hierarchy) or target_level < level:
        raise NonNestedMeshError(
            f"Cannot transfer from level {level} to level {target_level}"
        )
    return NodalField(
        prolongate(coarse_field.values, hierarchy, level, target_level),
        hierarchy.levels[target_level],
    )


@lru_cache(maxsize=8)
def _norm_matrices(mesh: SimplicialMesh) -> Tuple[SparseMatrix, SparseMatrix]:
    return assemble_mass(mesh), assemble_stiffness(mesh)


def fe_norms(field: FieldLike, reference: FieldLike, mesh: SimplicialMesh) -> Tuple[float, float]:
    """(L2, H1) norms of field - reference on `mesh`."""
    error = field_values(mesh, field) - field_values(mesh, reference)
    M, A = _norm_matrices(mesh)
    l2_squared = max(float(error @ (M @ error)), 0.0)
    semi_squared = max(float(error @ (A @ error)), 0.0)
    return math.sqrt(l2_squared), math.sqrt(l2_squared + semi_squared)


# ----------------------------------------------------------------------
# error reports
# ----------------------------------------------------------------------


class ErrorReport(BaseModel):
    """Errors of a coarse run against the fine surrogate at the sample times."""

    h: float
    dt: float
    sample_times: List[float]
    l2_B: List[float]
    l2_N: List[float]
    h1_B: List[float]
    h1_N: List[float]

    @property
    def err1(self) -> float:
        """max over samples of ||e_B||_0 + ||e_N||_0."""
        return max(b + n for b, n in zip(self.l2_B, self.l2_N))

    @property
    def err2(self) -> float:
        """sqrt of the sum over samples of (||e_B||_1^2 + ||e_N||_1^2) dt."""
        return math.sqrt(sum((b * b + n * n) * self.dt for b, n in zip(self.h1_B, self.h1_N)))


def compute_error_report(
    coarse_run: Trajectory,
    fine_run: Trajectory,
    hierarchy: MeshHierarchy,
    sample_times: Optional[Sequence[float]] = None,
    include_nutrient: bool = True,
) -> ErrorReport:
    """
    Compare the captured states of a coarse run with a fine run.

    Raises:
        NonNestedMeshError: if the coarse mesh is not an ancestor of the fine mesh
        ValueError: if a sample time was not captured by both runs
    """
    level = hierarchy.level_of(coarse_run.mesh)
    target = hierarchy.level_of(fine_run.mesh)
    if level is None or target is None or level > target:
        raise NonNestedMeshError("Coarse and fine runs are not on nested levels of one hierarchy")

    times = list(sample_times) if sample_times is not None else coarse_run.sample_times
    if not times:
        raise ValueError("No sample times to compare")
    fine_mesh = hierarchy.levels[target]
    errors: Dict[str, List[float]] = {"l2_B": [], "l2_N": [], "h1_B": [], "h1_N": []}
    for t in times:
        try:
            coarse_state = coarse_run.state_at(t)
            fine_state = fine_run.state_at(t)
        except KeyError as exc:
            raise ValueError(f"Sample time mismatch: {exc}") from exc
        for name, coarse_values, fine_values in (
            ("B", coarse_state.B, fine_state.B),
            ("N", coarse_state.N, fine_state.N),
        ):
            if name == "N" and not include_nutrient:
                l2, h1 = 0.0, 0.0
            else:
                prolonged = prolongate(coarse_values, hierarchy, level, target)
                l2, h1 = fe_norms(prolonged, fine_values, fine_mesh)
            errors[f"l2_{name}"].append(l2)
            errors[f"h1_{name}"].append(h1)

    return ErrorReport(
        h=coarse_run.mesh.h, dt=coarse_run.dt, sample_times=[float(t) for t in times], **errors
    )


# ----------------------------------------------------------------------
# convergence tables
# ----------------------------------------------------------------------


def observed_order(e_prev: float, e_curr: float, h_prev: float, h_curr: float) -> Optional[float]:
    """log(e_prev / e_curr) / log(h_prev / h_curr); None when undefined."""
    if e_prev <= 0 or e_curr <= 0 or h_prev == h_curr:
        return None
    return math.log(e_prev / e_curr) / math.log(h_prev / h_curr)


class ConvergenceRow(BaseModel):
    h: float
    dt: float
    err1: float = Field(..., ge=0.0)
    err2: float = Field(..., ge=0.0)
    order1: Optional[float] = None
    order2: Optional[float] = None


class ConvergenceTable(BaseModel):
    """Rows by decreasing h with orders computed from consecutive rows."""

    experiment: str = ""
    rows: List[ConvergenceRow] = Field(default_factory=list)
    reports: List[ErrorReport] = Field(default_factory=list, exclude=True)

    def add_row(self, h: float, dt: float, err1: float, err2: float) -> ConvergenceRow:
        order1 = order2 = None
        if self.rows:
            previous = self.rows[-1]
            if not h < previous.h:
                raise ValueError(f"Rows must have decreasing h: {h} after {previous.h}")
            order1 = observed_order(previous.err1, err1, previous.h, h)
            order2 = observed_order(previous.err2, err2, previous.h, h)
        row = ConvergenceRow(h=h, dt=dt, err1=err1, err2=err2, order1=order1, order2=order2)
        self.rows.append(row)
        return row

    def add_report(self, report: ErrorReport) -> ConvergenceRow:
        self.reports.append(report)
        return self.add_row(report.h, report.dt, report.err1, report.err2)

    @property
    def orders1(self) -> List[float]:
        return [row.order1 for row in self.rows[1:] if row.order1 is not None]

    @property
    def orders2(self) -> List[float]:
        return [row.order2 for row in self.rows[1:] if row.order2 is not None]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.model_dump() for row in self.rows], columns=CONVERGENCE_COLUMNS)


# ----------------------------------------------------------------------
# studies
# ----------------------------------------------------------------------

StudyProgress = Callable[[str], None]


def _level_config(run_config: RunConfig, study: StudyConfig, dt: float) -> RunConfig:
    data = run_config.model_dump()
    data.update(
        mesh=study.base_mesh.model_dump(),
        dt=dt,
        T=study.T,
        sample_times=list(study.sample_times),
        refinements=0,
        capture_initial=False,
    )
    return build_run_config(data)


def convergence_study(
    model: ModelSpec,
    study: StudyConfig,
    run_config: RunConfig,
    max_workers: Optional[int] = None,
    progress: Optional[StudyProgress] = None,
) -> ConvergenceTable:
    """
    Run every coarse level and the fine surrogate, then tabulate errors and orders.

    Coarse level k is the k-th uniform refinement of the study's base mesh with
    dt from the schedule (or dt_factor * h^dt_power); the surrogate sits
    `extra_fine_levels` refinements below the finest coarse level and uses
    `fine_dt`. Runs are independent and execute on a thread pool.

    Raises:
        ConvergenceStudyError: a constituent run failed; carries the rows computed so far
    """
    hierarchy = MeshHierarchy.from_mesh(
        study.base_mesh.build(), study.levels - 1 + study.extra_fine_levels
    )
    fine_level = len(hierarchy) - 1
    jobs = []
    for level in range(study.levels):
        mesh = hierarchy.levels[level]
        jobs.append((level, _level_config(run_config, study, study.level_dt(level, mesh.h))))
    jobs.append((fine_level, _level_config(run_config, study, study.fine_dt)))

    workers = max_workers or Settings().worker_count(len(jobs))
    logger.info(
        "Convergence study %s: %d coarse levels, fine level %d (h=%.4g), %d workers",
        model.name,
        study.levels,
        fine_level,
        hierarchy.finest.h,
        workers,
    )

    def execute(job):
        level, config = job
        trajectory = run(model, config, mesh=hierarchy.levels[level])
        if progress is not None:
            progress(f"level {level} done (h={hierarchy.levels[level].h:.4g}, dt={config.dt:.3g})")
        return trajectory

    outcomes: List[Optional[Trajectory]] = []
    failures: List[Tuple[int, BaseException]] = []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(execute, job) for job in jobs]
        for (level, _), future in zip(jobs, futures):
            try:
                outcomes.append(future.result())
            except BiofilmPVIError as exc:
                outcomes.append(None)
                failures.append((level, exc))

    table = ConvergenceTable(experiment=model.name)
    fine_run = outcomes[-1]
    if fine_run is not None:
        for (level, _), trajectory in zip(jobs[:-1], outcomes[:-1]):
            if trajectory is None:
                break
            report = compute_error_report(
                trajectory, fine_run, hierarchy, study.sample_times, not model.scalar
            )
            row = table.add_report(report)
            logger.info(
                "level %d: h=%.4g dt=%.4g ERR1=%.4e ERR2=%.4e order1=%s order2=%s",
                level,
                row.h,
                row.dt,
                row.err1,
                row.err2,
                _format_order(row.order1),
                _format_order(row.order2),
            )

    if failures:
        level, cause = failures[0]
        raise ConvergenceStudyError(f"Run on level {level} failed: {cause}", table)
    return table


def _format_order(order: Optional[float]) -> str:
    return "-" if order is None else f"{order:.4f}"


def appendix_rate_check(
    which: Literal["scalar_pvi", "unconstrained"],
    levels: Optional[int] = None,
    max_workers: Optional[int] = None,
) -> ConvergenceTable:
    """Convergence table of the scalar double-obstacle or the unconstrained rate check."""
    if which not in APPENDIX_EXPERIMENTS:
        raise ValueError(f"Unknown rate check '{which}'; use one of {list(APPENDIX_EXPERIMENTS)}")
    model, run_config, study = builtin_study(APPENDIX_EXPERIMENTS[which])
    return convergence_study(model, study.with_levels(levels), run_config, max_workers)
