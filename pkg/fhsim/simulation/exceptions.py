"""
Error types raised by the simulation app.

All of them derive from ``ValueError`` so callers that only guard against bad
input keep working; orchestration code catches ``FhsimError``.
"""

from typing import Optional


class FhsimError(ValueError):
    """Base class for every error raised by fhsim."""


class LayoutMismatchError(FhsimError):
    """Parameter/gradient vectors from different architectures or lengths were combined."""


class NonFiniteError(FhsimError):
    """A parameter or gradient vector contains NaN or infinity."""


class EmptyBatchError(FhsimError):
    """A gradient was requested for an empty batch."""


class AggregationError(FhsimError):
    """Aggregation input is empty or carries no sample mass."""


class FederationError(FhsimError):
    """Training orchestration cannot proceed (empty center, unusable validation split)."""


class GeometryError(FhsimError):
    """Volume geometry is invalid (phantom does not fit, empty mask, bad spacing)."""


class HarmonizationError(FhsimError):
    """Histogram standardization input is degenerate."""


class FoldPlanError(FhsimError):
    """A cross-validation plan cannot be built for the given centers."""


class MetricError(FhsimError):
    """A metric is undefined for its input (e.g. AUC over one class)."""


class VolumeFormatError(FhsimError):
    """A volume file does not follow the FHV1 container layout."""


class ConfigError(FhsimError):
    """An experiment or profile configuration file is invalid."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        self.reason = message
        location = path or '<config>'
        if line is not None:
            location = f"{location}:{line}"
        super().__init__(f"{location}: {message}")
