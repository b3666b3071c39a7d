"""
Builtin experiment catalogue.

Named parameter sets live in config/experiments.yaml; this module loads them
and turns each entry into a validated ModelSpec, RunConfig and (optionally)
StudyConfig.
"""

import logging
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError

from biofilm_pvi.config import RunConfig, StudyConfig, build_run_config, build_study_config
from biofilm_pvi.exceptions import ConfigError, UnknownExperimentError
from biofilm_pvi.model import ModelSpec

logger = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).parent / "config"


class ExperimentDefinition(BaseModel):
    """Raw catalogue entry; validated into typed objects on request."""

    model_config = ConfigDict(extra="forbid")

    description: str = ""
    model: Dict[str, Any]
    run: Dict[str, Any]
    convergence: Optional[Dict[str, Any]] = None


class ExperimentCatalogue:
    """
    Experiments loaded from a YAML catalogue.

    Each top-level key is an experiment name mapping to `description`,
    `model`, `run` and optionally `convergence`.
    """

    def __init__(self, config_path: Optional[Union[str, Path]] = None):
        self.config_path = Path(config_path) if config_path else CONFIG_DIR / "experiments.yaml"
        self.definitions = self.load_configs()

    def load_configs(self) -> Dict[str, ExperimentDefinition]:
        """Load and shape-check every catalogue entry."""
        with open(self.config_path, "r") as f:
            raw = yaml.safe_load(f) or {}

        definitions = {}
        for name, entry in raw.items():
            try:
                definitions[name] = ExperimentDefinition.model_validate(entry)
            except ValidationError as exc:
                raise ConfigError(f"Catalogue entry '{name}' is malformed: {exc}") from exc
        logger.debug("Loaded %d experiments from %s", len(definitions), self.config_path)
        return definitions

    @property
    def names(self) -> List[str]:
        return list(self.definitions)

    def get(self, name: str) -> ExperimentDefinition:
        if name not in self.definitions:
            raise UnknownExperimentError(name, self.names)
        return self.definitions[name]

    def model(self, name: str) -> ModelSpec:
        definition = self.get(name)
        data = {"name": name, "description": definition.description, **definition.model}
        try:
            return ModelSpec.model_validate(data)
        except ValidationError as exc:
            raise ConfigError(f"Experiment '{name}' has invalid model data: {exc}") from exc

    def run_config(self, name: str) -> RunConfig:
        return build_run_config(dict(self.get(name).run))

    def study_config(self, name: str) -> StudyConfig:
        definition = self.get(name)
        if definition.convergence is None:
            raise ConfigError(f"Experiment '{name}' does not define a convergence study")
        return build_study_config(dict(definition.convergence))

    def has_study(self, name: str) -> bool:
        return self.get(name).convergence is not None


@lru_cache(maxsize=1)
def default_catalogue() -> ExperimentCatalogue:
    return ExperimentCatalogue()


def builtin_experiment(name: str) -> Tuple[ModelSpec, RunConfig]:
    """
    Model and default run settings of a named experiment.

    Raises:
        UnknownExperimentError: if `name` is not in the catalogue (lists valid names)
    """
    catalogue = default_catalogue()
    return catalogue.model(name), catalogue.run_config(name)


def builtin_study(name: str) -> Tuple[ModelSpec, RunConfig, StudyConfig]:
    """Model, run defaults and convergence-study settings of a named experiment."""
    catalogue = default_catalogue()
    return catalogue.model(name), catalogue.run_config(name), catalogue.study_config(name)


def list_experiments() -> List[Tuple[str, str]]:
    """(name, description) of every builtin experiment."""
    catalogue = default_catalogue()
    return [(name, catalogue.get(name).description) for name in catalogue.names]
