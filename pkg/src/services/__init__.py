"""Services for phantom generation, diffusion, training, inference and evaluation.

Only the configuration-independent pieces are re-exported here; import the
heavier modules (training, pipeline, evaluation) directly.
"""

from .errors import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_DIVERGENCE,
    EXIT_OK,
    ConfigError,
    DataFormatError,
    GeometryError,
    PetJointError,
    TrainingDivergenceError,
)
from .models import ClassRoster, ClassWeights, CountModel, LossReport, PhantomSpec, QuantReport

__all__ = [
    # Errors
    "PetJointError",
    "ConfigError",
    "DataFormatError",
    "GeometryError",
    "TrainingDivergenceError",
    "EXIT_OK",
    "EXIT_CONFIG",
    "EXIT_DATA",
    "EXIT_DIVERGENCE",
    # Models
    "ClassRoster",
    "ClassWeights",
    "CountModel",
    "PhantomSpec",
    "LossReport",
    "QuantReport",
]
