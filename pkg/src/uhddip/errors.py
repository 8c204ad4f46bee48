class UhddipError(Exception):
    """Base class for all package errors."""


class DimensionError(UhddipError, ValueError):
    pass


class ConfigError(UhddipError, ValueError):
    pass


class UsageError(UhddipError, ValueError):
    pass


class NumericError(UhddipError, ArithmeticError):
    pass


class IngestError(UhddipError, IOError):
    pass
