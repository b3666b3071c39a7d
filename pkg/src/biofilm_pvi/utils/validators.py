"""
Validators for command-line overrides and sample schedules
"""

import math
from typing import Any, Dict, List, Optional, Sequence, Tuple


def validate_overrides(overrides: Dict[str, Any]) -> Tuple[bool, List[str]]:
    """
    Validate CLI overrides before any run starts.

    Args:
        overrides: Override values keyed by option name; None means "not given"

    Returns:
        Tuple of (is_valid, list_of_errors)
    """
    errors = []

    for name in ("dt", "T"):
        value = overrides.get(name)
        if value is not None and (not math.isfinite(value) or value <= 0):
            errors.append(f"--{name} must be a positive number, got {value}")

    dt, T = overrides.get("dt"), overrides.get("T")
    if dt is not None and T is not None and dt > 0 and T > 0 and T < dt:
        errors.append(f"--T={T} is shorter than --dt={dt}")

    for name, minimum in (("refinements", 0), ("levels", 1), ("instances", 1)):
        value = overrides.get(name)
        if value is not None and value < minimum:
            errors.append(f"--{name} must be at least {minimum}, got {value}")

    mode = overrides.get("mode")
    if mode is not None and mode not in ("lagged", "implicit"):
        errors.append(f"--mode must be 'lagged' or 'implicit', got {mode}")

    return (len(errors) == 0, errors)


def validate_sample_times(
    samples: Sequence[float], T: float, dt: Optional[float] = None, tol: float = 1e-12
) -> Tuple[bool, List[str]]:
    """Check that sample times lie in [0, T] and, given dt, on the step grid."""
    errors = []
    for t in samples:
        if t < 0 or t > T * (1.0 + tol):
            errors.append(f"sample time {t} outside [0, {T}]")
        elif dt is not None and abs(round(t / dt) * dt - t) > tol * T:
            errors.append(f"sample time {t} does not fall on a multiple of dt={dt}")
    return (len(errors) == 0, errors)
