import math

import pytest

from biofilm_pvi.exceptions import ConfigError, UnknownExperimentError
from biofilm_pvi.experiments import (
    ExperimentCatalogue,
    builtin_experiment,
    builtin_study,
    default_catalogue,
    list_experiments,
)
from biofilm_pvi.model import BoundaryCondition, PowerDiffusivity

EXPECTED = [
    "ex5_1",
    "ex5_2_i",
    "ex5_2_ii",
    "ex5_2_iii",
    "ex5_2_iv",
    "ex5_3",
    "ex5_4",
    "ex5_5",
    "ex5_6",
    "appendix_A1",
    "appendix_A2",
]


def test_catalogue_lists_every_experiment():
    names = [name for name, _ in list_experiments()]
    assert names == EXPECTED
    assert all(description for _, description in list_experiments())


@pytest.mark.parametrize("name", EXPECTED)
def test_every_entry_validates(name):
    model, config = builtin_experiment(name)
    assert model.name == name
    assert config.n_steps >= 1
    assert config.sample_times


def test_ex5_1_parameters():
    model, config = builtin_experiment("ex5_1")
    assert model.B_upper == 0.02
    assert model.D_B.value == 0.5
    assert model.D_N.value == 0.1
    assert model.bc == BoundaryCondition.DIRICHLET_ZERO
    assert (model.monod.kappa_B, model.monod.kappa_N, model.monod.N_0) == (2500.0, 100.0, 0.7)
    assert config.sample_times == [0.05, 0.1]


def test_ex5_2_iv_uses_power_law():
    model, _ = builtin_experiment("ex5_2_iv")
    assert isinstance(model.D_B, PowerDiffusivity)
    assert (model.D_B.D_max, model.D_B.D_min, model.D_B.B_star) == (0.1, 0.001, 0.03)
    assert model.B_upper == 0.03
    assert model.bc == BoundaryCondition.NEUMANN_ZERO


def test_appendix_A1_is_scalar_double_obstacle():
    model, _ = builtin_experiment("appendix_A1")
    assert model.scalar
    assert (model.B_lower, model.B_upper) == (-0.04, 0.06)
    assert model.D_B.value == 0.5
    assert model.monod.kappa_B == pytest.approx(math.pi**2)
    assert model.B_init.amplitude == 0.04


def test_appendix_A2_is_unconstrained():
    model, config = builtin_experiment("appendix_A2")
    assert not model.constrained
    assert config.unconstrained_path
    _, _, study = builtin_study("appendix_A2")
    assert study.dt_power == 2


def test_studies_exist_where_expected():
    catalogue = default_catalogue()
    with_study = [name for name in EXPECTED if catalogue.has_study(name)]
    assert with_study == ["ex5_1", "ex5_3", "ex5_4", "appendix_A1", "appendix_A2"]
    with pytest.raises(ConfigError):
        builtin_study("ex5_5")


def test_unknown_name_lists_available():
    with pytest.raises(UnknownExperimentError) as info:
        builtin_experiment("ex9_9")
    message = str(info.value)
    assert "ex9_9" in message
    assert "ex5_1" in message and "appendix_A2" in message
    assert isinstance(info.value, KeyError)


def test_malformed_catalogue(tmp_path):
    path = tmp_path / "catalogue.yaml"
    path.write_text("broken:\n  description: no model\n  run: {dt: 0.1, T: 1.0}\n")
    with pytest.raises(ConfigError, match="broken"):
        ExperimentCatalogue(path)


def test_invalid_model_data(tmp_path):
    path = tmp_path / "catalogue.yaml"
    path.write_text(
        "bad:\n"
        "  model: {D_B: {kind: constant, value: -1}}\n"
        "  run: {dt: 0.1, T: 1.0}\n"
    )
    catalogue = ExperimentCatalogue(path)
    assert catalogue.names == ["bad"]
    with pytest.raises(ConfigError, match="invalid model data"):
        catalogue.model("bad")
