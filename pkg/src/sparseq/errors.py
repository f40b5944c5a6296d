"""Exception hierarchy shared by every module."""


class SparseqError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(SparseqError):
    """File does not follow the expected binary or text layout."""


class CorruptionError(SparseqError):
    """File header is valid but the payload size does not match it."""


class ValidationError(SparseqError, ValueError):
    """A value violates a data-model invariant."""


class DomainError(SparseqError, ValueError):
    """A function was called outside its mathematical domain."""


class ConfigurationError(SparseqError, ValueError):
    """Inconsistent configuration, e.g. a quantile channel that does not exist."""


class TrainingError(SparseqError, RuntimeError):
    """Training diverged."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step
