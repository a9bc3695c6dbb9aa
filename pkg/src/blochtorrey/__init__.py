"""Bloch and Bloch-Torrey forward models with MRI coefficient reconstruction."""

__version__ = "0.1.0"

from .core import (AdmissibilityError, BoundarySpec, CoeffFields, ConfigError, DomainError, Grid, MagState,
                   ModelError, ModelParams, PreconditionError, Trajectory, Waveform)

__all__ = [
    "AdmissibilityError", "BoundarySpec", "CoeffFields", "ConfigError", "DomainError", "Grid", "MagState",
    "ModelError", "ModelParams", "PreconditionError", "Trajectory", "Waveform", "__version__",
]
