import numpy as np
import pytest

from biofilm_pvi.analysis import ConvergenceTable
from biofilm_pvi.config import MeshSource, RunConfig
from biofilm_pvi.output import (
    SERIES_FILENAME,
    snapshot_name,
    write_convergence_csv,
    write_run_outputs,
    write_series_csv,
    write_vtk,
)
from biofilm_pvi.solver import SystemState
from biofilm_pvi.timeloop import SERIES_COLUMNS, run


@pytest.fixture
def short_run(model_factory):
    config = RunConfig(mesh=MeshSource(cells=6), dt=0.01, T=0.04, sample_times=[0.02, 0.04])
    return run(model_factory(B_upper=0.012), config)


def test_series_csv(short_run, tmp_path):
    path = write_series_csv(short_run, tmp_path / "nested" / SERIES_FILENAME)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(SERIES_COLUMNS)
    assert len(lines) == 6
    assert lines[1].startswith("0,")


def test_convergence_csv_leaves_first_orders_empty(tmp_path):
    table = ConvergenceTable()
    table.add_row(0.1, 0.1, 0.4, 0.8)
    table.add_row(0.05, 0.05, 0.2, 0.2)
    lines = write_convergence_csv(table, tmp_path / "convergence.csv").read_text().splitlines()
    assert lines[0] == "h,dt,err1,err2,order1,order2"
    assert lines[1].endswith(",,")
    assert lines[2].split(",")[4:] == ["1.000000e+00", "2.000000e+00"]


def test_vtk_layout_on_triangles(square2, tmp_path):
    q = square2.n_vertices
    state = SystemState(np.linspace(0.0, 0.1, q), -np.ones(q), np.full(q, 0.5), 0.25)
    lines = write_vtk(square2, state, tmp_path / "square.vtk").read_text().splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0"
    assert lines[1] == "biofilm_pvi state t=0.25"
    assert lines[4] == f"POINTS {q} double"
    assert lines[5].split()[2] == "0.000000000000e+00"
    assert f"CELLS {square2.n_cells} {4 * square2.n_cells}" in lines
    start = lines.index(f"CELL_TYPES {square2.n_cells}") + 1
    assert set(lines[start : start + square2.n_cells]) == {"5"}
    for name in ("B", "N", "Lambda"):
        assert f"SCALARS {name} double 1" in lines
    lambda_start = lines.index("SCALARS Lambda double 1") + 2
    assert float(lines[lambda_start]) == -1.0


def test_vtk_cell_type_on_lines(interval4, tmp_path):
    state = SystemState(np.zeros(5), np.zeros(5), np.ones(5))
    lines = write_vtk(interval4, state, tmp_path / "line.vtk").read_text().splitlines()
    start = lines.index("CELL_TYPES 4") + 1
    assert lines[start : start + 4] == ["3"] * 4
    assert "2 0 1" in lines


def test_run_outputs_are_reproducible(short_run, tmp_path):
    first = write_run_outputs(short_run, tmp_path / "a")
    second = write_run_outputs(short_run, tmp_path / "b")
    assert [path.name for path in first] == [SERIES_FILENAME, snapshot_name(0), snapshot_name(1)]
    for a, b in zip(first, second):
        assert a.read_bytes() == b.read_bytes()
    assert "t=0.04" in first[-1].read_text().splitlines()[1]


def test_snapshot_names_sort_in_time_order():
    names = [snapshot_name(index) for index in (0, 9, 10, 120)]
    assert names == sorted(names)
    assert names[0] == "state_t000.vtk"
