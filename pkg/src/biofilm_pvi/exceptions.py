"""
Exception hierarchy for biofilm_pvi.

Every error raised on purpose by the package derives from BiofilmPVIError so
the CLI can tell a modelling/configuration problem from a programming bug.
"""

from __future__ import annotations

from typing import TYPE_CHECKING, Any, List, Optional, Sequence

if TYPE_CHECKING:
    from biofilm_pvi.analysis import ConvergenceTable
    from biofilm_pvi.solver import NewtonReport
    from biofilm_pvi.timeloop import Trajectory


class BiofilmPVIError(Exception):
    """Base class for all package errors."""


class MeshError(BiofilmPVIError, ValueError):
    """Invalid mesh data or unsupported mesh operation."""

    def __init__(self, message: str, cell: Optional[int] = None):
        super().__init__(message)
        self.cell = cell


class MeshFormatError(MeshError):
    """Mesh text file could not be parsed."""

    def __init__(self, message: str, path: Any = None, line: Optional[int] = None):
        location = ""
        if path is not None:
            location = f"{path}" + (f":{line}" if line is not None else "") + ": "
        super().__init__(location + message)
        self.path = path
        self.line = line


class NonNestedMeshError(MeshError):
    """Fields live on meshes that are not levels of one hierarchy."""


class MeshMismatchError(MeshError):
    """Field and mesh (or two fields) do not belong together."""


class AssemblyError(BiofilmPVIError):
    """Finite element assembly failed, e.g. a negative diffusivity."""

    def __init__(self, message: str, cell: Optional[int] = None):
        super().__init__(message)
        self.cell = cell


class ModelError(BiofilmPVIError, ValueError):
    """Model data violates its assumptions."""

    def __init__(self, message: str, node: Optional[int] = None):
        super().__init__(message)
        self.node = node


class UnknownExperimentError(ModelError, KeyError):
    """Requested builtin experiment does not exist."""

    def __init__(self, name: str, available: Sequence[str]):
        self.name = name
        self.available = list(available)
        super().__init__(
            f"Unknown experiment '{name}'. Available: {', '.join(self.available)}"
        )

    def __str__(self) -> str:
        return self.args[0]


class ConfigError(BiofilmPVIError, ValueError):
    """Run, study or CLI configuration is invalid."""

    def __init__(self, message: str, errors: Optional[List[str]] = None):
        super().__init__(message)
        self.errors = errors or [message]


class SolverError(BiofilmPVIError):
    """Base class for nonlinear/linear solver failures."""


class SingularSystemError(SolverError):
    """Linear system could not be solved."""

    def __init__(self, message: str, iteration: Optional[int] = None):
        if iteration is not None:
            message = f"Newton iteration {iteration}: {message}"
        super().__init__(message)
        self.iteration = iteration


class NewtonConvergenceError(SolverError):
    """Semismooth Newton did not reach the tolerance within max_iter."""

    def __init__(self, report: "NewtonReport"):
        super().__init__(
            f"Semismooth Newton failed after {report.iterations} iterations "
            f"(residual {report.final_residual_maxnorm:.3e}, "
            f"{report.active_node_count} active nodes)"
        )
        self.report = report


class RunFailedError(BiofilmPVIError):
    """A time-stepping run aborted; the partial trajectory is preserved."""

    def __init__(self, step: int, cause: BaseException, trajectory: "Trajectory"):
        super().__init__(f"Run aborted at step {step}: {cause}")
        self.step = step
        self.cause = cause
        self.trajectory = trajectory


class ConvergenceStudyError(BiofilmPVIError):
    """A constituent run of a convergence study failed."""

    def __init__(self, message: str, partial: "ConvergenceTable"):
        super().__init__(message)
        self.partial = partial
