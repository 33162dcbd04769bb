"""Exception hierarchy shared by all services.

Every error carries the process exit code the CLI maps it to, so a failure deep
inside training or I/O surfaces with a stable code:

    0 success, 2 config error, 3 data error, 4 numeric divergence
"""

from typing import Any, Optional

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4


class PetJointError(Exception):
    """Base class for all project errors."""

    exit_code: int = EXIT_DATA

    def __init__(self, message: str, field: Optional[str] = None, context: Optional[dict] = None):
        super().__init__(message)
        self.field = field
        self.context = context or {}


class ConfigError(PetJointError):
    """Invalid or inconsistent configuration."""

    exit_code = EXIT_CONFIG


class PlanError(ConfigError):
    """A patch grid cannot be planned for the requested geometry."""


class SpecError(ConfigError):
    """A phantom specification violates its invariants."""


class ParameterizationError(ConfigError):
    """Network parameters leave their admissible domain (e.g. unstable scan decay)."""


class DataFormatError(PetJointError):
    """Malformed container file or payload; `field` names the offending part."""

    exit_code = EXIT_DATA


class GeometryError(PetJointError):
    """Paired volumes disagree in dims or voxel size."""

    exit_code = EXIT_DATA


class ClassIndexError(PetJointError):
    """Class index outside the label roster."""

    exit_code = EXIT_DATA


class UndefinedMetricError(PetJointError):
    """Metric undefined for the given input (zero range, zero reference...)."""

    exit_code = EXIT_DATA


class DegenerateInputError(PetJointError):
    """Statistical routine received degenerate input (constant regressor...)."""

    exit_code = EXIT_DATA


class TrainingDivergenceError(PetJointError):
    """A loss term became non-finite; `report` holds the offending values."""

    exit_code = EXIT_DIVERGENCE

    def __init__(self, message: str, report: Optional[dict[str, Any]] = None):
        super().__init__(message, context=report)
        self.report = report or {}
