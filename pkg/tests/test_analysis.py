import math

import numpy as np
import pytest

from biofilm_pvi.analysis import (
    CONVERGENCE_COLUMNS,
    ConvergenceTable,
    ErrorReport,
    appendix_rate_check,
    compute_error_report,
    convergence_study,
    fe_norms,
    observed_order,
    prolongate,
    transfer_to_fine,
)
from biofilm_pvi.assembly import NodalField
from biofilm_pvi.config import MeshSource, RunConfig, StudyConfig
from biofilm_pvi.exceptions import NonNestedMeshError
from biofilm_pvi.experiments import builtin_study
from biofilm_pvi.mesh import MeshHierarchy, generate_interval
from biofilm_pvi.model import MonodSpec
from biofilm_pvi.timeloop import run


def test_prolongation_is_exact_for_linears(interval4, square2):
    line = MeshHierarchy.from_mesh(interval4, 2)
    fine = prolongate(interval4.vertices[:, 0], line, 0, 2)
    np.testing.assert_allclose(fine, line.finest.vertices[:, 0], atol=1e-14)

    plane = MeshHierarchy.from_mesh(square2, 2)
    values = 2.0 * square2.vertices[:, 0] - 3.0 * square2.vertices[:, 1] + 0.5
    fine_vertices = plane.finest.vertices
    expected = 2.0 * fine_vertices[:, 0] - 3.0 * fine_vertices[:, 1] + 0.5
    np.testing.assert_allclose(prolongate(values, plane, 0, 2), expected, atol=1e-13)


def test_prolongation_averages_at_midpoints(interval4):
    hierarchy = MeshHierarchy.from_mesh(interval4, 1)
    coarse = np.array([0.0, 4.0, -2.0, 1.0, 3.0])
    fine = prolongate(coarse, hierarchy, 0, 1)
    order = np.argsort(hierarchy.finest.vertices[:, 0])
    assert fine[order].tolist() == pytest.approx([0.0, 2.0, 4.0, 1.0, -2.0, -0.5, 1.0, 2.0, 3.0])
    np.testing.assert_array_equal(prolongate(coarse, hierarchy, 0, 0), coarse)


def test_transfer_checks_nesting(interval4):
    hierarchy = MeshHierarchy.from_mesh(interval4, 2)
    field = NodalField(np.ones(5), interval4)
    transferred = transfer_to_fine(field, hierarchy, 2)
    assert transferred.mesh is hierarchy.finest
    np.testing.assert_allclose(transferred.values, 1.0)

    stranger = NodalField(np.ones(5), generate_interval(0.0, 1.0, 4))
    with pytest.raises(NonNestedMeshError):
        transfer_to_fine(stranger, hierarchy, 2)
    fine_field = NodalField(np.ones(hierarchy.finest.n_vertices), hierarchy.finest)
    with pytest.raises(NonNestedMeshError):
        transfer_to_fine(fine_field, hierarchy, 0)


def test_norms_of_simple_fields():
    mesh = generate_interval(0.0, 1.0, 8)
    x = mesh.vertices[:, 0]
    zero = np.zeros_like(x)
    assert fe_norms(x, x, mesh) == (0.0, 0.0)
    l2, h1 = fe_norms(np.full_like(x, -0.3), zero, mesh)
    assert l2 == pytest.approx(0.3)
    assert h1 == pytest.approx(0.3)
    l2, h1 = fe_norms(x, zero, mesh)
    assert l2 == pytest.approx(1.0 / math.sqrt(3.0))
    assert h1 == pytest.approx(math.sqrt(4.0 / 3.0))


@pytest.mark.parametrize(
    "errors, expected",
    [((0.4, 0.2), 1.0), ((0.4, 0.1), 2.0), ((0.02, 0.02), 0.0)],
)
def test_observed_order_of_halving(errors, expected):
    assert observed_order(errors[0], errors[1], 0.1, 0.05) == pytest.approx(expected, abs=1e-12)


def test_observed_order_recovers_power():
    h = [0.1, 0.05, 0.025, 0.0125]
    for p in (0.5, 1.0, 1.5, 2.0):
        errors = [3.7 * hk**p for hk in h]
        for k in range(1, len(h)):
            order = observed_order(errors[k - 1], errors[k], h[k - 1], h[k])
            assert order == pytest.approx(p, abs=1e-12)


def test_observed_order_undefined():
    assert observed_order(0.0, 0.1, 0.1, 0.05) is None
    assert observed_order(0.1, 0.05, 0.1, 0.1) is None


def test_convergence_table_rows():
    table = ConvergenceTable(experiment="synthetic")
    first = table.add_row(0.1, 0.1, 0.4, 0.8)
    assert first.order1 is None and first.order2 is None
    table.add_row(0.05, 0.05, 0.2, 0.2)
    assert table.orders1 == pytest.approx([1.0])
    assert table.orders2 == pytest.approx([2.0])
    with pytest.raises(ValueError, match="decreasing"):
        table.add_row(0.05, 0.05, 0.1, 0.1)

    frame = table.to_frame()
    assert list(frame.columns) == CONVERGENCE_COLUMNS
    assert len(frame) == 2
    assert frame["order1"].iloc[1] == pytest.approx(1.0)


def test_error_aggregates():
    report = ErrorReport(
        h=0.1,
        dt=0.01,
        sample_times=[0.05, 0.1],
        l2_B=[0.1, 0.2],
        l2_N=[0.05, 0.0],
        h1_B=[0.3, 0.4],
        h1_N=[0.0, 0.0],
    )
    assert report.err1 == pytest.approx(0.2)
    assert report.err2 == pytest.approx(0.05)
    reordered = report.model_copy(
        update={
            "sample_times": [0.1, 0.05],
            "l2_B": [0.2, 0.1],
            "l2_N": [0.0, 0.05],
            "h1_B": [0.4, 0.3],
        }
    )
    assert reordered.err1 == report.err1
    assert reordered.err2 == pytest.approx(report.err2, rel=1e-15)


@pytest.fixture
def small_study(model_factory):
    model = model_factory(B_upper=0.012, monod=MonodSpec(kappa_B=20.0, kappa_N=1.0, N_0=0.5))
    study = StudyConfig(
        base_mesh=MeshSource(kind="interval", cells=4),
        levels=2,
        extra_fine_levels=2,
        fine_dt=0.0025,
        dt_schedule=[0.02, 0.01],
        sample_times=[0.04, 0.08],
        T=0.08,
    )
    config = RunConfig(mesh=MeshSource(cells=4), dt=0.02, T=0.08)
    return model, study, config


def test_error_against_itself_vanishes(small_study):
    model, study, config = small_study
    hierarchy = MeshHierarchy.from_mesh(study.base_mesh.build(), 1)
    config = config.with_overrides(sample_times=[0.04, 0.08])
    trajectory = run(model, config, mesh=hierarchy.finest)
    report = compute_error_report(trajectory, trajectory, hierarchy)
    assert report.err1 == 0.0
    assert report.err2 == 0.0
    assert report.h == pytest.approx(0.125)


def test_error_report_requires_nesting(small_study):
    model, study, config = small_study
    config = config.with_overrides(sample_times=[0.08])
    hierarchy = MeshHierarchy.from_mesh(study.base_mesh.build(), 1)
    coarse = run(model, config, mesh=hierarchy.levels[0])
    outsider = run(model, config, mesh=generate_interval(0.0, 1.0, 8))
    with pytest.raises(NonNestedMeshError):
        compute_error_report(coarse, outsider, hierarchy)
    fine = run(model, config, mesh=hierarchy.finest)
    with pytest.raises(ValueError, match="Sample time"):
        compute_error_report(coarse, fine, hierarchy, sample_times=[0.04])


def test_small_study_converges(small_study):
    model, study, config = small_study
    messages = []
    table = convergence_study(model, study, config, max_workers=2, progress=messages.append)
    assert len(messages) == 3
    assert [row.h for row in table.rows] == pytest.approx([0.25, 0.125])
    assert [row.dt for row in table.rows] == pytest.approx([0.02, 0.01])
    assert table.rows[1].err1 < table.rows[0].err1
    assert len(table.reports) == 2
    assert table.reports[0].sample_times == [0.04, 0.08]


def test_unknown_rate_check():
    with pytest.raises(ValueError, match="scalar_pvi"):
        appendix_rate_check("quadratic")


@pytest.mark.slow
def test_ex5_1_orders():
    model, config, study = builtin_study("ex5_1")
    table = convergence_study(model, study, config)
    assert len(table.orders1) == 2
    assert all(0.85 <= order <= 1.15 for order in table.orders1)
    assert all(1.3 <= order <= 1.6 for order in table.orders2)


@pytest.mark.slow
@pytest.mark.parametrize("name", ["ex5_3", "ex5_4"])
def test_2d_orders(name):
    model, config, study = builtin_study(name)
    table = convergence_study(model, study, config)
    assert all(0.9 <= order <= 1.7 for order in table.orders1)
    assert all(0.85 <= order <= 1.8 for order in table.orders2)


@pytest.mark.slow
def test_unconstrained_rate_is_second_order():
    table = appendix_rate_check("unconstrained", levels=2)
    assert len(table.orders1) == 1
    assert all(1.7 <= order <= 2.2 for order in table.orders1)


@pytest.mark.slow
def test_scalar_rate_is_first_order():
    table = appendix_rate_check("scalar_pvi")
    assert all(0.85 <= order <= 1.3 for order in table.orders1)
