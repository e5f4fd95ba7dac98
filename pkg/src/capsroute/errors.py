"""Exception types shared across the package."""


class CapsrouteError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CapsrouteError, ValueError):
    """Operands have incompatible or invalid shapes."""


class DomainError(CapsrouteError, ValueError):
    """A scalar argument lies outside the function's domain."""


class NumericError(CapsrouteError, ArithmeticError):
    """A computation produced NaN or Inf where finite values are required."""


class ConfigError(CapsrouteError, ValueError):
    """A configuration value or combination is invalid."""


class UnsupportedOpError(CapsrouteError, TypeError):
    """A traced program used an operation with no registered gradient."""


class IdxFormatError(CapsrouteError, ValueError):
    """Base class for IDX container parsing failures."""


class IdxBadMagicError(IdxFormatError):
    """The IDX magic number does not match the expected value."""


class IdxTruncatedError(IdxFormatError):
    """The IDX payload is shorter than its header promises."""


class IdxCountMismatchError(IdxFormatError):
    """Image and label files disagree on the number of examples."""


class TrainAbortError(CapsrouteError, RuntimeError):
    """Training hit a non-finite loss; carries a diagnostics snapshot."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class BenchError(CapsrouteError, RuntimeError):
    """The benchmark harness cannot produce a trustworthy measurement."""
