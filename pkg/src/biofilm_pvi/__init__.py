"""
biofilm_pvi - Finite element solver for biofilm growth under a density constraint

Piecewise-linear finite elements in space, backward Euler in time and
semismooth Newton for the pointwise constraint B <= B* coupled to a
diffusing, consumed nutrient.
"""

__version__ = "1.0.0"
__author__ = "biofilm_pvi developers"

from biofilm_pvi.experiments import builtin_experiment, list_experiments
from biofilm_pvi.model import ModelSpec
from biofilm_pvi.timeloop import run

__all__ = ["builtin_experiment", "list_experiments", "ModelSpec", "run"]
