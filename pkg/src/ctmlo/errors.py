"""Exception hierarchy shared across the package."""


class CtmloError(Exception):
    """Base class for all package errors."""


class ConfigError(CtmloError, ValueError):
    """Invalid or inconsistent configuration."""


class StreamFormatError(CtmloError):
    """Recorded-stream file is malformed (bad magic, version or truncation)."""


class OutOfIntervalError(CtmloError, ValueError):
    """A time query falls outside the valid interval."""


class SingularSystemError(CtmloError, ArithmeticError):
    """Normal-equation matrix could not be factorized."""


class DegenerateInputError(CtmloError, ValueError):
    """Too few usable points for the requested computation."""
