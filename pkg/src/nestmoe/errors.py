"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError (and its
subclasses) -> 2, DataError -> 3, NumericError -> 4.
"""


class NestmoeError(Exception):
    """Base class for all package errors."""


class ConfigError(NestmoeError):
    """Invalid configuration: bad dimensions, counts, or option values."""

    exit_code = 2


class ShapeError(ConfigError):
    """Operands have incompatible shapes. Message names both shapes."""


class DataError(NestmoeError):
    """Malformed or inconsistent data files (magic, version, CRC, schema)."""

    exit_code = 3


class NumericError(NestmoeError):
    """Non-finite values where finite numbers are required."""

    exit_code = 4


class StabilityError(ConfigError):
    """A PDE spec violates its explicit stability bound."""


class UnknownOpError(ConfigError):
    """An op kind that was never registered with the tape."""
