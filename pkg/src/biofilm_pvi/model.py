"""
Continuous model data: Monod kinetics, diffusivity laws, constraint bounds,
initial and source expressions, and the ModelSpec tying them together.

All objects are immutable pydantic models; evaluation functions are pure and
vectorized over numpy arrays.
"""

from __future__ import annotations

import logging
import math
from enum import Enum
from typing import Annotated, Any, Callable, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from biofilm_pvi.exceptions import ModelError

logger = logging.getLogger(__name__)

# coordinates this close to a box face count as on it
EDGE_TOLERANCE = 1e-12


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


# ----------------------------------------------------------------------
# Monod kinetics
# ----------------------------------------------------------------------


class MonodSpec(_Frozen):
    """Monod growth/utilization constants."""

    kappa_B: float = Field(..., ge=0.0, description="Growth constant (1/s)")
    kappa_N: float = Field(..., ge=0.0, description="Utilization constant (1/s)")
    N_0: float = Field(..., gt=0.0, description="Half-saturation concentration (kg/m^3)")

    @model_validator(mode="after")
    def _warn_ordering(self) -> "MonodSpec":
        if self.kappa_B < self.kappa_N:
            logger.warning(
                "kappa_B=%g < kappa_N=%g; the model assumes kappa_B >= kappa_N",
                self.kappa_B,
                self.kappa_N,
            )
        return self


def clamp_nutrient(N: np.ndarray) -> Tuple[np.ndarray, int]:
    """Negative nutrient values clamped to zero, plus the number clamped."""
    N = np.asarray(N, dtype=float)
    negative = N < 0.0
    return np.where(negative, 0.0, N), int(np.count_nonzero(negative))


def monod_P(N, N_0: float):
    """P(N) = N / (N + N_0), with negative N treated as 0."""
    N = np.maximum(np.asarray(N, dtype=float), 0.0)
    return N / (N + N_0)


def monod_dP(N, N_0: float):
    """P'(N) = N_0 / (N + N_0)^2 for N >= 0, zero on the clamped branch."""
    N = np.asarray(N, dtype=float)
    return np.where(N >= 0.0, N_0 / (np.maximum(N, 0.0) + N_0) ** 2, 0.0)


def reaction_F(B, N, monod: MonodSpec):
    """Growth F(B, N) = kappa_B P(N) B."""
    return monod.kappa_B * monod_P(N, monod.N_0) * np.asarray(B, dtype=float)


def reaction_G(B, N, monod: MonodSpec):
    """Utilization G(B, N) = -kappa_N P(N) B."""
    return -monod.kappa_N * monod_P(N, monod.N_0) * np.asarray(B, dtype=float)


# ----------------------------------------------------------------------
# Diffusivity laws
# ----------------------------------------------------------------------


class ConstantDiffusivity(_Frozen):
    kind: Literal["constant"] = "constant"
    value: float = Field(..., gt=0.0)

    @property
    def bounds(self) -> Tuple[float, float]:
        return self.value, self.value

    def evaluate(self, B):
        return np.full(np.shape(B), self.value, dtype=float)


class _BiomassDependent(_Frozen):
    D_max: float = Field(..., gt=0.0)
    D_min: float = Field(..., gt=0.0)
    B_star: float = Field(..., gt=0.0, description="Biomass density where D_max is reached")

    @model_validator(mode="after")
    def _check_range(self):
        if self.D_min > self.D_max:
            raise ValueError(f"D_min={self.D_min} exceeds D_max={self.D_max}")
        return self

    @property
    def bounds(self) -> Tuple[float, float]:
        return self.D_min, self.D_max

    def _scaled(self, B) -> np.ndarray:
        return np.clip(np.asarray(B, dtype=float), 0.0, self.B_star) / self.B_star


class LinearDiffusivity(_BiomassDependent):
    """D(B) = (D_max - D_min) (B / B*) + D_min."""

    kind: Literal["linear"] = "linear"

    def evaluate(self, B):
        return (self.D_max - self.D_min) * self._scaled(B) + self.D_min


class PowerDiffusivity(_BiomassDependent):
    """D(B) = (D_max - D_min) (B / B*)^p + D_min, steep close to B*."""

    kind: Literal["power"] = "power"
    exponent: float = Field(default=8.0, gt=0.0)

    def evaluate(self, B):
        return (self.D_max - self.D_min) * self._scaled(B) ** self.exponent + self.D_min


DiffusivityLaw = Annotated[
    Union[ConstantDiffusivity, LinearDiffusivity, PowerDiffusivity],
    Field(discriminator="kind"),
]


def eval_diffusivity(law, B):
    """Evaluate a diffusivity law; B is clamped into [0, B*] first."""
    return law.evaluate(B)


# ----------------------------------------------------------------------
# Initial data, sources and spatial coefficients
# ----------------------------------------------------------------------


class _Expression(_Frozen):
    def __call__(self, points: np.ndarray, t: float = 0.0) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        return self._evaluate(points)

    def _evaluate(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def at_vertices(self, mesh) -> np.ndarray:
        return self(mesh.vertices)


class ConstantExpression(_Expression):
    kind: Literal["constant"] = "constant"
    value: float = 0.0

    def _evaluate(self, points):
        return np.full(points.shape[0], self.value)


class BoxIndicator(_Expression):
    """
    value on the closed box [lower, upper], zero elsewhere.

    With edge="mean" points on the box boundary take value / 2, so the nodal
    interpolant of the jump carries the exact mass when the jump sits on a vertex.
    """

    kind: Literal["box"] = "box"
    value: float
    lower: List[float]
    upper: List[float]
    edge: Literal["closed", "mean"] = "closed"

    def _evaluate(self, points):
        lower = np.asarray(self.lower)
        upper = np.asarray(self.upper)
        scale = max(1.0, float(np.max(np.abs(np.concatenate([lower, upper])))))
        tol = EDGE_TOLERANCE * scale
        inside = np.all((points >= lower - tol) & (points <= upper + tol), axis=1)
        values = np.where(inside, self.value, 0.0)
        if self.edge == "mean":
            on_edge = np.any(
                (np.abs(points - lower) <= tol) | (np.abs(points - upper) <= tol), axis=1
            )
            values = np.where(inside & on_edge, 0.5 * self.value, values)
        return values


class BallIndicator(_Expression):
    """value on the closed ball |x - center| <= radius."""

    kind: Literal["ball"] = "ball"
    value: float
    center: List[float]
    radius: float = Field(..., gt=0.0)

    def _evaluate(self, points):
        distance = np.linalg.norm(points - np.asarray(self.center), axis=1)
        return np.where(distance <= self.radius, self.value, 0.0)


class SineProfile(_Expression):
    """amplitude * sin(wavenumber * x_axis), optionally in absolute value."""

    kind: Literal["sine"] = "sine"
    amplitude: float
    wavenumber: float = math.pi
    axis: int = 0
    absolute: bool = False

    def _evaluate(self, points):
        values = np.sin(self.wavenumber * points[:, self.axis])
        if self.absolute:
            values = np.abs(values)
        return self.amplitude * values


class JumpProfile(_Expression):
    """left for x_axis < at, right for x_axis > at, their mean at x_axis = at."""

    kind: Literal["jump"] = "jump"
    left: float
    right: float
    at: float
    axis: int = 0

    def _evaluate(self, points):
        x = points[:, self.axis]
        values = np.where(x < self.at, self.left, self.right)
        return np.where(x == self.at, 0.5 * (self.left + self.right), values)


class TagIndicator(_Expression):
    """value on vertices carrying the subdomain tag; only defined at mesh vertices."""

    kind: Literal["tag"] = "tag"
    value: float
    tag: int = 1

    def __call__(self, points, t: float = 0.0):
        raise ModelError("Tag indicators are defined only at mesh vertices")

    def at_vertices(self, mesh) -> np.ndarray:
        return np.where(mesh.vertex_tags == self.tag, self.value, 0.0)


FieldExpression = Annotated[
    Union[
        ConstantExpression,
        BoxIndicator,
        BallIndicator,
        SineProfile,
        JumpProfile,
        TagIndicator,
    ],
    Field(discriminator="kind"),
]

DataFunction = Union[FieldExpression, Callable[..., Any]]


# ----------------------------------------------------------------------
# ModelSpec
# ----------------------------------------------------------------------


class BoundaryCondition(str, Enum):
    DIRICHLET_ZERO = "dirichlet_zero"
    NEUMANN_ZERO = "neumann_zero"


def _zero() -> ConstantExpression:
    return ConstantExpression(value=0.0)


class ModelSpec(BaseModel):
    """
    Complete continuous problem: diffusion, reaction, constraint and data.

    `spatial_rate`, when set, replaces P(N) in the growth term, giving the
    linear reaction kappa_B * s(x) * B. `scalar=True` freezes the nutrient
    (no diffusion, no consumption) so the biofilm inequality is solved alone.
    """

    model_config = ConfigDict(frozen=True, extra="forbid", arbitrary_types_allowed=True)

    name: str = "custom"
    description: str = ""
    D_B: DiffusivityLaw
    D_N: DiffusivityLaw
    monod: MonodSpec
    B_lower: float = -math.inf
    B_upper: float = math.inf
    f: DataFunction = Field(default_factory=_zero)
    g: DataFunction = Field(default_factory=_zero)
    bc: BoundaryCondition = BoundaryCondition.DIRICHLET_ZERO
    B_init: DataFunction
    N_init: DataFunction
    spatial_rate: Optional[DataFunction] = None
    scalar: bool = False

    @field_validator("B_upper", "B_lower", mode="before")
    @classmethod
    def _parse_infinity(cls, value):
        if isinstance(value, str):
            return float(value.replace("infinity", "inf"))
        return value

    @model_validator(mode="after")
    def _check_bounds(self) -> "ModelSpec":
        if not self.B_lower < self.B_upper:
            raise ModelError(f"B_lower={self.B_lower} must be below B_upper={self.B_upper}")
        if math.isnan(self.B_lower) or math.isnan(self.B_upper):
            raise ModelError("Constraint bounds must not be NaN")
        return self

    @property
    def constrained(self) -> bool:
        return math.isfinite(self.B_upper) or math.isfinite(self.B_lower)

    @property
    def double_obstacle(self) -> bool:
        return math.isfinite(self.B_upper) and math.isfinite(self.B_lower)

    def with_updates(self, **changes) -> "ModelSpec":
        """Validated copy with some fields replaced."""
        data = {name: getattr(self, name) for name in type(self).model_fields}
        data.update(changes)
        return type(self).model_validate(data)
