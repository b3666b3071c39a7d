import numpy as np
import pytest

from biofilm_pvi.config import MeshSource, RunConfig
from biofilm_pvi.exceptions import ConfigError, ModelError, NewtonConvergenceError, RunFailedError
from biofilm_pvi.experiments import builtin_experiment
from biofilm_pvi.mesh import generate_interval, generate_rectangle
from biofilm_pvi.model import (
    BoundaryCondition,
    ConstantDiffusivity,
    ConstantExpression,
    MonodSpec,
    SineProfile,
)
from biofilm_pvi.solver import SystemState, complementarity_violation
from biofilm_pvi.timeloop import (
    SERIES_COLUMNS,
    Trajectory,
    free_boundary_activity,
    growth_slopes,
    initialize,
    run,
    total_biomass,
)


def interval_config(cells=20, **fields):
    data = dict(mesh=MeshSource(kind="interval", cells=cells), dt=0.01, T=0.2)
    data.update(fields)
    return RunConfig(**data)


@pytest.fixture
def binding_run(model_factory):
    """Every interior node starts close to B* under fast growth."""
    model = model_factory(
        D_B=ConstantDiffusivity(value=0.001),
        D_N=ConstantDiffusivity(value=0.1),
        monod=MonodSpec(kappa_B=20.0, kappa_N=1.0, N_0=0.1),
        B_upper=0.021,
        B_init=ConstantExpression(value=0.02),
    )
    return model, interval_config(cells=5, T=0.05)


def test_conservation_without_reactions(model_factory):
    model = model_factory(
        bc=BoundaryCondition.NEUMANN_ZERO,
        monod=MonodSpec(kappa_B=0.0, kappa_N=0.0, N_0=0.5),
        N_init=SineProfile(amplitude=1.0, wavenumber=2.0),
    )
    frame = run(model, interval_config()).to_frame()
    for column in ("total_B", "total_N"):
        values = frame[column].to_numpy()
        assert np.all(np.abs(values - values[0]) <= 1e-10 * abs(values[0]))
    assert frame["active_nodes"].sum() == 0


def test_nutrient_decreases_under_consumption(model_factory):
    model = model_factory(
        bc=BoundaryCondition.NEUMANN_ZERO,
        monod=MonodSpec(kappa_B=0.0, kappa_N=2.0, N_0=0.5),
        B_init=ConstantExpression(value=0.01),
        N_init=SineProfile(amplitude=1.0, absolute=True),
    )
    frame = run(model, interval_config(tol=1e-10)).to_frame()
    total_N = frame["total_N"].to_numpy()
    assert np.all(np.diff(total_N) <= 1e-12)
    assert total_N[-1] < total_N[0]
    np.testing.assert_allclose(frame["total_B"], 0.01, rtol=1e-12)


def test_series_layout(model_factory):
    trajectory = run(model_factory(), interval_config())
    frame = trajectory.to_frame()
    assert list(frame.columns) == SERIES_COLUMNS
    assert frame["step"].tolist() == list(range(21))
    assert frame["t"].iloc[-1] == pytest.approx(0.2)
    assert trajectory.completed_steps == 20


def test_zero_steps_keeps_initial_row(model_factory):
    config = interval_config(capture_initial=True)
    trajectory = run(model_factory(), config, n_steps=0)
    assert trajectory.completed_steps == 0
    assert len(trajectory.series) == 1
    assert trajectory.sample_times == [0.0]


def test_samples_are_captured(model_factory):
    config = interval_config(sample_times=[0.1, 0.2])
    trajectory = run(model_factory(), config)
    assert trajectory.capture_steps == [10, 20]
    assert trajectory.state_at(0.1).t == pytest.approx(0.1)
    with pytest.raises(KeyError):
        trajectory.state_at(0.15)


def test_progress_callback(model_factory):
    calls = []
    run(model_factory(), interval_config(T=0.05), progress=lambda k, n: calls.append((k, n)))
    assert calls == [(k, 5) for k in range(1, 6)]


def test_initialize_zeroes_dirichlet_boundary(model_factory, interval10):
    state = initialize(model_factory(), interval10)
    assert state.N[0] == 0.0 and state.N[-1] == 0.0
    assert state.N[5] == 1.0
    assert not state.Lambda.any()


def test_initialize_rejects_data_above_bound(model_factory, interval10):
    model = model_factory(B_upper=0.005, B_init=ConstantExpression(value=0.01))
    with pytest.raises(ModelError, match="node 1") as info:
        initialize(model, interval10)
    assert info.value.node == 1


def test_unconstrained_path_needs_unconstrained_model(model_factory):
    with pytest.raises(ConfigError, match="unconstrained_path"):
        run(model_factory(B_upper=0.02), interval_config(unconstrained_path=True))


def test_unconstrained_path_matches_newton(model_factory):
    model = model_factory()
    config = interval_config(tol=1e-10, sample_times=[0.2])
    direct = run(model, config.with_overrides(unconstrained_path=True))
    newton = run(model, config)
    np.testing.assert_allclose(direct.states[-1].B, newton.states[-1].B, atol=1e-8)
    assert direct.to_frame()["newton_iters"].sum() == 0


def test_failed_step_keeps_partial_trajectory(binding_run):
    model, config = binding_run
    with pytest.raises(RunFailedError) as info:
        run(model, config.with_overrides(max_iter=1))
    assert info.value.step == 1
    assert isinstance(info.value.cause, NewtonConvergenceError)
    assert info.value.trajectory.completed_steps == 0


def test_binding_run_is_feasible(binding_run):
    model, config = binding_run
    samples = [0.01, 0.02, 0.03, 0.04, 0.05]
    trajectory = run(model, config.with_overrides(tol=1e-12, sample_times=samples))
    assert trajectory.activation_step == 1
    for state in trajectory.states:
        assert state.B.max() <= model.B_upper + 1e-10
        assert state.Lambda.max() <= 1e-10
        assert complementarity_violation(state, model) <= 1e-8


def test_total_biomass_of_constants():
    line = generate_interval(0.0, 1.0, 7)
    state = SystemState(np.full(8, 0.02), np.zeros(8), np.zeros(8))
    assert total_biomass(state, line) == pytest.approx(0.02)
    square = generate_rectangle((-1.0, 1.0), (-1.0, 1.0), 4)
    q = square.n_vertices
    state = SystemState(np.full(q, 0.3), np.zeros(q), np.zeros(q))
    assert total_biomass(state, square) == pytest.approx(1.2)


def _trajectory_with_sets(mesh, sets):
    trajectory = Trajectory(mesh=mesh, dt=0.1)
    trajectory.active_sets = [np.asarray(nodes, dtype=int) for nodes in sets]
    return trajectory


def test_activity_without_constraint(interval4):
    report = free_boundary_activity(_trajectory_with_sets(interval4, [[], [], []]))
    assert report.total == 0.0
    assert report.plateaued


def test_activity_of_one_cell(interval4):
    report = free_boundary_activity(_trajectory_with_sets(interval4, [[], [0], [0], [0]]))
    assert report.total == pytest.approx(0.25)
    assert report.running_sum.tolist() == pytest.approx([0.0, 0.25, 0.25, 0.25])
    assert report.plateaued


def test_activity_counts_every_switch(interval4):
    report = free_boundary_activity(_trajectory_with_sets(interval4, [[], [2], [], [2]]))
    assert report.total == pytest.approx(1.5)
    assert not report.plateaued


def test_ex5_1_activation(ex5_1):
    model, config = ex5_1
    trajectory = run(model, config)
    assert trajectory.sample_times == pytest.approx([0.05, 0.1])
    assert trajectory.activation_time is not None
    assert 0.005 <= trajectory.activation_time <= 0.04

    first = trajectory.activation_step
    assert all(active.size == 0 for active in trajectory.active_sets[:first])
    assert all(active.size > 0 for active in trajectory.active_sets[first:])
    assert 1.0 <= trajectory.mean_newton_iterations <= 4.0

    activity = free_boundary_activity(trajectory)
    assert 0.0 < activity.total <= 1.0
    assert np.all(np.diff(activity.running_sum) >= 0.0)
    for state in trajectory.states:
        assert state.B.max() <= model.B_upper + 1e-10
        assert complementarity_violation(state, model) <= 1e-8


def test_ex5_1_is_feasible_at_default_tolerance(ex5_1):
    model, config = ex5_1
    samples = [k * config.time_step for k in range(1, 11)]
    trajectory = run(model, config.with_overrides(sample_times=samples), n_steps=10)
    assert trajectory.activation_time is not None
    assert len(trajectory.states) == 10
    for state in trajectory.states:
        assert state.B.max() <= model.B_upper + 1e-10
        assert state.Lambda.max() <= 1e-10
        assert complementarity_violation(state, model) <= 1e-8


def test_double_obstacle_run_advances():
    model, config = builtin_experiment("appendix_A1")
    trajectory = run(model, config, n_steps=5)
    assert trajectory.completed_steps == 5
    frame = trajectory.to_frame()
    assert frame["newton_iters"].iloc[1:].min() >= 1
    assert frame["active_nodes"].iloc[-1] > 0


def test_runs_are_deterministic(ex5_1):
    model, config = ex5_1
    config = config.with_overrides(T=0.05, sample_times=[0.05])
    first, second = run(model, config), run(model, config)
    assert first.to_frame().equals(second.to_frame())
    np.testing.assert_array_equal(first.states[-1].B, second.states[-1].B)


def test_growth_slopes_taper_after_activation(binding_run):
    model, config = binding_run
    trajectory = run(model, config.with_overrides(T=0.2))
    slopes = growth_slopes(trajectory)
    assert slopes.activation_time == pytest.approx(0.01)
    assert slopes.late < slopes.pre_activation
