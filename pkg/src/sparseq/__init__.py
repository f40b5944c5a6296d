"""Quantile regression with sparse track labels on raster grids."""

from .core import QuantileStack, Raster, SparseLabels, Track
from .errors import (
    ConfigurationError,
    CorruptionError,
    DomainError,
    FormatError,
    SparseqError,
    TrainingError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "QuantileStack", "Raster", "SparseLabels", "Track",
    "SparseqError", "FormatError", "CorruptionError", "ValidationError", "DomainError",
    "ConfigurationError", "TrainingError",
]
