"""Shared exception and warning types."""


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or infeasible."""


class IdxFormatError(ValueError):
    """An IDX file is malformed; the message names the failing byte offset."""


class NumericError(ArithmeticError):
    """A numeric quantity became non-finite where finiteness is required."""


class NumericWarning(RuntimeWarning):
    """A value was clamped or adjusted to keep the arithmetic well-defined."""
