"""
Result files: per-step series CSV, convergence CSV and legacy ASCII VTK snapshots.

All writers use fixed column orders and number formats so identical runs
produce byte-identical files.
"""

import logging
from pathlib import Path
from typing import List, Union

import numpy as np

from biofilm_pvi.analysis import ConvergenceTable
from biofilm_pvi.mesh import SimplicialMesh
from biofilm_pvi.solver import SystemState
from biofilm_pvi.timeloop import Trajectory

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SERIES_FILENAME = "series.csv"
CONVERGENCE_FILENAME = "convergence.csv"

# legacy VTK cell types for line, triangle and tetrahedron
VTK_CELL_TYPES = {1: 3, 2: 5, 3: 10}


def _prepare(path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_series_csv(trajectory: Trajectory, path: PathLike) -> Path:
    """Per-step diagnostics with header step,t,total_B,total_N,active_nodes,..."""
    path = _prepare(path)
    trajectory.to_frame().to_csv(path, index=False, float_format="%.12e", lineterminator="\n")
    return path


def write_convergence_csv(table: ConvergenceTable, path: PathLike) -> Path:
    """Convergence table with header h,dt,err1,err2,order1,order2 (first-row orders empty)."""
    path = _prepare(path)
    table.to_frame().to_csv(
        path, index=False, float_format="%.6e", na_rep="", lineterminator="\n"
    )
    return path


def _format_values(values: np.ndarray) -> str:
    return "\n".join(f"{value:.12e}" for value in values)


def write_vtk(mesh: SimplicialMesh, state: SystemState, path: PathLike, title: str = "") -> Path:
    """
    Legacy ASCII VTK unstructured grid with B, N and Lambda as point scalars.

    Coordinates are padded with zeros to three components.
    """
    path = _prepare(path)
    points = np.zeros((mesh.n_vertices, 3))
    points[:, : mesh.dim] = mesh.vertices
    n_local = mesh.dim + 1

    lines = [
        "# vtk DataFile Version 3.0",
        (title or f"biofilm_pvi state t={state.t:.12g}").replace("\n", " ")[:255],
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.n_vertices} double",
    ]
    lines.extend(" ".join(f"{x:.12e}" for x in point) for point in points)
    lines.append(f"CELLS {mesh.n_cells} {mesh.n_cells * (n_local + 1)}")
    lines.extend(f"{n_local} " + " ".join(str(int(v)) for v in cell) for cell in mesh.cells)
    lines.append(f"CELL_TYPES {mesh.n_cells}")
    lines.extend([str(VTK_CELL_TYPES[mesh.dim])] * mesh.n_cells)
    lines.append(f"POINT_DATA {mesh.n_vertices}")
    for name, values in (("B", state.B), ("N", state.N), ("Lambda", state.Lambda)):
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines.append(_format_values(values))

    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    return path


def snapshot_name(index: int) -> str:
    return f"state_t{index:03d}.vtk"


def write_run_outputs(trajectory: Trajectory, out_dir: PathLike) -> List[Path]:
    """series.csv plus one VTK snapshot per captured state, numbered in time order."""
    out_dir = Path(out_dir)
    written = [write_series_csv(trajectory, out_dir / SERIES_FILENAME)]
    for index, state in enumerate(trajectory.states):
        written.append(
            write_vtk(
                trajectory.mesh,
                state,
                out_dir / snapshot_name(index),
                title=f"{trajectory.model_name} t={state.t:.12g}",
            )
        )
    logger.info("Wrote %d files to %s", len(written), out_dir)
    return written
