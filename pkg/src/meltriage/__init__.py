"""Whole-slide triage pipeline: tessellation planning, an attention-based
feature-bag classifier with hand-derived gradients, calibration-aware
evaluation with bootstrap intervals, and the case-assignment simulation."""

__version__ = "0.1.0"

from .errors import (
    FormatError,
    MetricUndefinedError,
    NumericError,
    TriageError,
    ValidationError,
)
from .records import CaseRecord, CrossSection, FeatureBag, Label, SlideRecord

__all__ = [
    "CaseRecord",
    "CrossSection",
    "FeatureBag",
    "FormatError",
    "Label",
    "MetricUndefinedError",
    "NumericError",
    "SlideRecord",
    "TriageError",
    "ValidationError",
    "__version__",
]
