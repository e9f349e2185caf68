"""Exception hierarchy shared across the toolkit."""


class RomkitError(Exception):
    """Base class for all toolkit errors."""


class FormatError(RomkitError):
    """A file does not follow the expected wire format."""


class LandmarkValidationError(RomkitError):
    """A landmark series violates a structural invariant."""


class DegenerateGeometryError(RomkitError):
    """Joint-angle computation received a zero-length limb vector."""


class UnusableVideoError(RomkitError):
    """No candidate joint signal has usable landmark coverage."""


class SegmentationFailureError(RomkitError):
    """No signal candidate produced any detectable repetition."""


class InsufficientDataError(RomkitError):
    """Too few valid samples or repetitions for the requested statistic."""


class AggregationError(RomkitError):
    """Records with mismatched keys were passed to an aggregation step."""


class DatasetBuildError(RomkitError):
    """The meta-regression design table could not be assembled."""


class DesignError(RomkitError):
    """The fixed-effects design matrix is unusable (e.g. rank deficient)."""


class ConvergenceError(RomkitError):
    """REML optimization failed to converge after all starts."""

    def __init__(self, message: str, trace: list[str] | None = None):
        super().__init__(message)
        self.trace = trace or []


class ConfigError(RomkitError):
    """Configuration file is malformed or contains unknown keys."""


class EvaluationJoinError(RomkitError):
    """Predictions and annotations could not be joined by video id."""

    def __init__(self, message: str, unmatched: list[str] | None = None):
        super().__init__(message)
        self.unmatched = unmatched or []
