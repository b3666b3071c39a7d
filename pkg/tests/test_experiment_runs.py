"""
Long runs of the builtin experiments. Deselected by default; run with `pytest -m slow`.
"""

import numpy as np
import pytest

from biofilm_pvi.experiments import builtin_experiment, list_experiments
from biofilm_pvi.solver import complementarity_violation
from biofilm_pvi.timeloop import growth_slopes, run

BUILTINS = [name for name, _ in list_experiments()]


@pytest.mark.slow
@pytest.mark.parametrize("name", BUILTINS)
def test_every_step_is_complementary(name):
    model, config = builtin_experiment(name)
    samples = [k * config.time_step for k in range(1, config.n_steps + 1)]
    trajectory = run(model, config.with_overrides(sample_times=samples))

    assert trajectory.completed_steps == config.n_steps
    assert len(trajectory.states) == config.n_steps
    for state in trajectory.states:
        assert np.all(np.isfinite(state.B)) and np.all(np.isfinite(state.N))
        assert state.B.max() <= model.B_upper + 1e-10
        if not model.double_obstacle:
            assert state.Lambda.max() <= 1e-10
        assert complementarity_violation(state, model) <= 1e-8


@pytest.fixture(scope="module")
def ex5_2_slopes():
    slopes = {}
    for variant in ("i", "ii", "iii", "iv"):
        model, config = builtin_experiment(f"ex5_2_{variant}")
        slopes[variant] = growth_slopes(run(model, config))
    return slopes


@pytest.mark.slow
@pytest.mark.parametrize("variant", ["i", "ii", "iii", "iv"])
def test_growth_tapers_after_activation(ex5_2_slopes, variant):
    slopes = ex5_2_slopes[variant]
    assert slopes.activation_time is not None
    assert slopes.pre_activation > 0.0
    assert slopes.late < 0.5 * slopes.pre_activation


@pytest.mark.slow
def test_steep_diffusivity_tapers_more(ex5_2_slopes):
    assert ex5_2_slopes["iv"].late <= ex5_2_slopes["iii"].late
