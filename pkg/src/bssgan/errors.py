"""Exception types shared across the package.

The CLI maps each family onto a process exit code.
"""


class BssGanError(Exception):
    exit_code = 1


class ConfigError(BssGanError, ValueError):
    """Bad shapes, bad hyper-parameters, unknown pipeline ids."""

    exit_code = 2


class DataError(BssGanError):
    """Missing or unusable dataset content."""

    exit_code = 3


class NumericError(BssGanError, ArithmeticError):
    """A NaN/Inf reached a loss or a gradient."""

    exit_code = 4


class UsageError(BssGanError, RuntimeError):
    """API misuse, e.g. running backward twice over one tape."""
