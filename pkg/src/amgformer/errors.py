"""Exception taxonomy for the package.

Every error raised on purpose derives from AmgError so callers (and the
CLI) can map failures to exit codes without matching on strings.
"""


class AmgError(Exception):
    """Base class for all package errors."""


class ShapeError(AmgError):
    """An array has the wrong rank, size, or an inconsistent axis."""


class ParameterError(AmgError):
    """A numeric argument is outside its documented range."""


class ConfigError(AmgError):
    """A configuration value or file is invalid (also covers unknown keys)."""


class ContractError(AmgError):
    """A documented precondition was violated by the caller."""


class DataError(AmgError):
    """Input data is malformed (bad labels, corrupt file, wrong magic)."""


class DegenerateError(AmgError):
    """A computation hit a degenerate statistic (zero variance, empty
    reduction, fully masked attention row)."""


class NumericError(AmgError):
    """A non-finite value appeared where finiteness is required."""
