"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(IOError):
    """Unreadable, truncated, or malformed data on disk."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the math guarantees finite ones."""


class SizeError(ValueError):
    """Problem instance exceeds the documented size limit of an algorithm."""
