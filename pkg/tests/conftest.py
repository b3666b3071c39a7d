"""
Shared fixtures: small meshes, builtin experiments and hand-made models.
"""

import logging
import math

import numpy as np
import pytest

from biofilm_pvi.experiments import builtin_experiment
from biofilm_pvi.mesh import generate_interval, generate_rectangle
from biofilm_pvi.model import (
    BoundaryCondition,
    ConstantDiffusivity,
    ConstantExpression,
    ModelSpec,
    MonodSpec,
    SineProfile,
)
from biofilm_pvi.solver import SystemState


@pytest.fixture(autouse=True)
def reset_package_logger():
    """The CLI detaches the package logger from the root; reattach it for caplog."""
    yield
    logger = logging.getLogger("biofilm_pvi")
    logger.handlers = []
    logger.propagate = True
    logger.setLevel(logging.NOTSET)


@pytest.fixture
def interval4():
    return generate_interval(0.0, 1.0, 4)


@pytest.fixture
def interval10():
    return generate_interval(0.0, 1.0, 10)


@pytest.fixture
def square2():
    return generate_rectangle((-1.0, 1.0), (-1.0, 1.0), 2)


@pytest.fixture
def ex5_1():
    return builtin_experiment("ex5_1")


def make_model(**changes) -> ModelSpec:
    """Dirichlet model with mild kinetics; keyword arguments replace fields."""
    data = dict(
        name="test",
        D_B=ConstantDiffusivity(value=0.1),
        D_N=ConstantDiffusivity(value=0.2),
        monod=MonodSpec(kappa_B=5.0, kappa_N=1.0, N_0=0.5),
        B_upper=math.inf,
        bc=BoundaryCondition.DIRICHLET_ZERO,
        B_init=SineProfile(amplitude=0.01),
        N_init=ConstantExpression(value=1.0),
    )
    data.update(changes)
    return ModelSpec(**data)


@pytest.fixture
def model_factory():
    return make_model


def random_state(mesh, seed=0, t=0.0, boundary_zero=True) -> SystemState:
    rng = np.random.default_rng(seed)
    B = rng.uniform(0.0, 0.02, mesh.n_vertices)
    N = rng.uniform(0.1, 1.0, mesh.n_vertices)
    if boundary_zero:
        B[mesh.boundary_vertices] = 0.0
        N[mesh.boundary_vertices] = 0.0
    return SystemState(B, np.zeros_like(B), N, t)


@pytest.fixture
def state_factory():
    return random_state
