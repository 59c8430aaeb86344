"""Exception types raised across the package."""


class AttnFlowError(Exception):
    """Base class for all package errors."""


class DimensionError(AttnFlowError, ValueError):
    """Tensor shapes or resolutions are incompatible."""


class ValidationError(AttnFlowError, ValueError):
    """A value violates a documented invariant (range, finiteness, ...)."""


class DegeneracyError(AttnFlowError, ArithmeticError):
    """A linear system is too ill-conditioned to solve reliably."""


class ConfigError(AttnFlowError, ValueError):
    """Invalid or inconsistent configuration."""


class SchemaError(ValidationError):
    """A file does not conform to its documented schema.

    ``field`` names the offending entry.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class NonFiniteLossError(AttnFlowError, FloatingPointError):
    """Training produced a NaN/inf loss; ``dump_path`` points to the saved batch."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
