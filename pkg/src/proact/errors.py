"""Exception hierarchy shared by every module."""


class ProactError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(ProactError, ValueError):
    pass


class ShapeError(ProactError, ValueError):
    pass


class PositionOrderError(ProactError, ValueError):
    pass


class SealedSegmentError(ProactError, RuntimeError):
    pass


class CacheOverflowError(ProactError, RuntimeError):
    """Incoming tokens cannot fit in the window even after evicting everything evictable."""


class MissingFlagError(ProactError, ValueError):
    pass


class InvalidTargetError(ProactError, ValueError):
    pass


class OutOfRangeError(ProactError, ValueError):
    pass


class UndefinedMetricError(ProactError, ValueError):
    pass


class InvalidScoreError(ProactError, ValueError):
    pass


class NumericError(ProactError, FloatingPointError):
    """Raised when training produces a non-finite loss."""


class StreamStepError(ProactError):
    """Wraps a failure inside a streaming step with the chunk index that caused it."""

    def __init__(self, chunk_index: int, cause: Exception):
        super().__init__(f"chunk t={chunk_index}: {cause}")
        self.chunk_index = chunk_index
        self.cause = cause
