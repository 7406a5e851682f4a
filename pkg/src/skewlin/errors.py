"""Exception hierarchy shared across the package."""

from __future__ import annotations


class SkewlinError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(SkewlinError):
    """Malformed or inconsistent run configuration."""

    def __init__(self, message, location=None):
        self.location = location
        if location:
            message = f"{location}: {message}"
        super().__init__(message)


class DimensionMismatchError(SkewlinError):
    """Operands have incompatible dimension or truncation degree."""


class SingularJetError(SkewlinError):
    """Jet has a non-invertible linear part."""


class HypothesisError(SkewlinError):
    """A system fails one of the standing hypotheses.

    Carries the report that triggered the failure when available.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ResonanceError(HypothesisError):
    """A resonance (or cross-base sign flip) was detected mid-solve."""


class ConvergenceError(SkewlinError):
    """An iteration failed to reach its tolerance within its budget."""

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class ScaleError(SkewlinError):
    """A chart scale is too large for the containment requirements."""


class SplittingError(SkewlinError):
    """Projective iteration failed to produce a dominated splitting."""
