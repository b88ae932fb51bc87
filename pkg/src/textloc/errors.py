"""Exception types raised across the package."""


class TextLocError(Exception):
    """Base class for all package errors."""


class ConfigurationError(TextLocError, ValueError):
    pass


class EmptyDatasetError(TextLocError):
    pass


class DatasetGenerationError(TextLocError):
    pass


class SchemaVersionError(TextLocError, OSError):
    pass


class DegenerateInputError(TextLocError, ValueError):
    pass


class NumericError(TextLocError, FloatingPointError):
    pass


class DivergenceError(TextLocError, RuntimeError):
    """Training produced a non-finite loss."""


class IndexFingerprintError(TextLocError):
    """An index and a checkpoint were produced by different encoders."""
