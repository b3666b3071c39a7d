"""
Run, study and process configuration.

RunConfig and StudyConfig are pydantic models validated on construction;
Settings reads PVI_* environment variables (and a local .env) through
pydantic-settings.
"""

from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from biofilm_pvi.exceptions import ConfigError
from biofilm_pvi.mesh import (
    SimplicialMesh,
    generate_interval,
    generate_rectangle,
    import_mesh,
)
from biofilm_pvi.utils.validators import validate_sample_times

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"

STEP_TOLERANCE = 1e-9
SAMPLE_TOLERANCE = 1e-12


class MeshSource(BaseModel):
    """Where the base mesh of a run comes from."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["interval", "rectangle", "file"] = "interval"
    bounds: Tuple[float, float] = (0.0, 1.0)
    cells: int = Field(default=50, ge=1, description="Interval cells or squares per side")
    x_range: Tuple[float, float] = (-1.0, 1.0)
    y_range: Tuple[float, float] = (-1.0, 1.0)
    path: Optional[str] = None

    @model_validator(mode="after")
    def _check_path(self) -> "MeshSource":
        if self.kind == "file" and not self.path:
            raise ValueError("mesh kind 'file' requires a path")
        return self

    def resolve_path(self) -> Path:
        """Absolute mesh path; relative names are looked up in the package data first."""
        path = Path(self.path or "")
        if path.is_absolute():
            return path
        bundled = DATA_DIR / path
        return bundled if bundled.exists() else path.resolve()

    def build(self) -> SimplicialMesh:
        if self.kind == "interval":
            return generate_interval(self.bounds[0], self.bounds[1], self.cells)
        if self.kind == "rectangle":
            return generate_rectangle(self.x_range, self.y_range, self.cells)
        return import_mesh(self.resolve_path())

    def describe(self) -> str:
        if self.kind == "file":
            return f"file {self.path}"
        if self.kind == "interval":
            return f"interval {self.bounds} with {self.cells} cells"
        return f"rectangle {self.x_range}x{self.y_range}, m={self.cells}"


class RunConfig(BaseModel):
    """Time stepping, solver and output settings of a single run."""

    model_config = ConfigDict(extra="forbid")

    mesh: MeshSource = Field(default_factory=MeshSource)
    dt: float = Field(..., gt=0.0)
    T: float = Field(..., gt=0.0)
    sample_times: List[float] = Field(default_factory=list)
    tol: float = Field(default=1e-6, gt=0.0)
    max_iter: int = Field(default=50, ge=1)
    mode: Literal["lagged", "implicit"] = "lagged"
    lumped_mass: bool = False
    refinements: int = Field(default=0, ge=0)
    unconstrained_path: bool = False
    capture_initial: bool = False

    @model_validator(mode="after")
    def _check_time_grid(self) -> "RunConfig":
        if self.T < self.dt * (1.0 - STEP_TOLERANCE):
            raise ValueError(f"T={self.T} is shorter than dt={self.dt}")
        ratio = self.T / self.dt
        if abs(ratio - round(ratio)) > STEP_TOLERANCE * max(1.0, ratio):
            raise ValueError(f"T={self.T} is not an integer multiple of dt={self.dt}")
        ok, errors = validate_sample_times(
            self.sample_times, self.T, self.time_step, SAMPLE_TOLERANCE
        )
        if not ok:
            raise ValueError("; ".join(errors))
        self.sample_times = sorted(set(self.sample_times))
        return self

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def time_step(self) -> float:
        """dt snapped to T / N_T."""
        return self.T / int(round(self.T / self.dt))

    @property
    def sample_steps(self) -> List[int]:
        return [int(round(t / self.time_step)) for t in self.sample_times]

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Validated copy with some fields replaced (None values are ignored)."""
        data = self.model_dump()
        data.update({key: value for key, value in overrides.items() if value is not None})
        return build_run_config(data)


class StudyConfig(BaseModel):
    """Nested-mesh convergence study: coarse levels, fine surrogate and time steps."""

    model_config = ConfigDict(extra="forbid")

    base_mesh: MeshSource
    levels: int = Field(default=3, ge=1)
    extra_fine_levels: int = Field(default=1, ge=1)
    dt_factor: float = Field(default=1.0, gt=0.0)
    dt_power: Literal[1, 2] = 1
    dt_schedule: Optional[List[float]] = None
    fine_dt: float = Field(..., gt=0.0)
    sample_times: List[float]
    T: float = Field(..., gt=0.0)

    @model_validator(mode="after")
    def _check_schedule(self) -> "StudyConfig":
        if not self.sample_times:
            raise ValueError("a convergence study needs at least one sample time")
        if self.dt_schedule is not None and len(self.dt_schedule) != self.levels:
            raise ValueError(
                f"dt_schedule has {len(self.dt_schedule)} entries for {self.levels} levels"
            )
        return self

    def level_dt(self, level: int, h: float) -> float:
        """Time step of coarse level `level`: the schedule entry or dt_factor * h^dt_power."""
        if self.dt_schedule is not None:
            return self.dt_schedule[level]
        return self.dt_factor * h**self.dt_power

    def with_levels(self, levels: Optional[int]) -> "StudyConfig":
        if levels is None or levels == self.levels:
            return self
        data = self.model_dump()
        data["levels"] = levels
        if self.dt_schedule is not None:
            if levels > len(self.dt_schedule):
                raise ConfigError(
                    f"dt_schedule defines only {len(self.dt_schedule)} levels, {levels} requested"
                )
            data["dt_schedule"] = self.dt_schedule[:levels]
        return build_study_config(data)


class Settings(BaseSettings):
    """Process-wide settings from PVI_* environment variables or .env."""

    model_config = SettingsConfigDict(env_prefix="PVI_", env_file=".env", extra="ignore")

    threads: Optional[int] = Field(default=None, ge=1, description="Worker cap for studies")
    log_level: str = "INFO"
    log_dir: Optional[str] = None

    def worker_count(self, jobs: int) -> int:
        cap = self.threads or os.cpu_count() or 1
        return max(1, min(cap, jobs))


def _messages(exc: ValidationError) -> List[str]:
    messages = []
    for error in exc.errors():
        location = ".".join(str(part) for part in error["loc"])
        messages.append(f"{location}: {error['msg']}" if location else error["msg"])
    return messages


def build_run_config(data: Dict[str, Any]) -> RunConfig:
    """RunConfig from plain data, with validation failures raised as ConfigError."""
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        errors = _messages(exc)
        raise ConfigError("Invalid run configuration: " + "; ".join(errors), errors) from exc


def build_study_config(data: Dict[str, Any]) -> StudyConfig:
    try:
        return StudyConfig.model_validate(data)
    except ValidationError as exc:
        errors = _messages(exc)
        raise ConfigError("Invalid study configuration: " + "; ".join(errors), errors) from exc


MESH_KEY_PREFIX = "mesh_"


def read_config_file(path: Union[str, Path]) -> Tuple[str, Dict[str, Any]]:
    """
    Read a flat YAML run config.

    The `experiment` key names the builtin model; every other key is a
    RunConfig field, with mesh fields spelled `mesh_<field>` (e.g. `mesh_cells`).

    Returns:
        Tuple of (experiment name, RunConfig overrides)
    """
    path = Path(path)
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"Config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"Config file {path} is not valid YAML: {exc}") from exc

    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must contain a key-value mapping")

    errors = []
    experiment = data.pop("experiment", None)
    if not isinstance(experiment, str):
        errors.append("missing 'experiment' key naming a builtin experiment")

    run_fields = set(RunConfig.model_fields) - {"mesh"}
    mesh_fields = set(MeshSource.model_fields)
    overrides: Dict[str, Any] = {}
    mesh_overrides: Dict[str, Any] = {}
    for key, value in data.items():
        if isinstance(value, dict):
            errors.append(f"{key}: nested mappings are not allowed")
        elif key in run_fields:
            overrides[key] = value
        elif key.startswith(MESH_KEY_PREFIX) and key[len(MESH_KEY_PREFIX):] in mesh_fields:
            mesh_overrides[key[len(MESH_KEY_PREFIX):]] = value
        else:
            errors.append(f"unknown key '{key}'")
    if errors:
        raise ConfigError(f"Invalid config file {path}: " + "; ".join(errors), errors)

    if mesh_overrides:
        overrides["mesh"] = mesh_overrides
    logger.debug("Read config file %s for experiment %s", path, experiment)
    return experiment, overrides


def merge_run_config(base: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """Apply config-file overrides, merging mesh fields into the base mesh source."""
    data = base.model_dump()
    for key, value in overrides.items():
        if key == "mesh":
            data["mesh"] = {**data["mesh"], **value}
        else:
            data[key] = value
    return build_run_config(data)
