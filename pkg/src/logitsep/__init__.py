"""Logit-separation losses, single-logit evaluation and timing tools."""

__version__ = "0.1.0"

from .errors import DimensionError, DomainError, FormatError, NumericalError, TrainingDiverged, UsageError
from .losses import LogitMatrix, LossConfig, LossValue, loss_dispatch
from .pols import SeparationReport, check_alignment, counterexample_ce, separation

__all__ = [
    "DimensionError",
    "DomainError",
    "FormatError",
    "LogitMatrix",
    "LossConfig",
    "LossValue",
    "NumericalError",
    "SeparationReport",
    "TrainingDiverged",
    "UsageError",
    "check_alignment",
    "counterexample_ce",
    "loss_dispatch",
    "separation",
]
