"""Exception types shared across the package.

The CLI maps each class to a process exit code.
"""


class MDEError(Exception):
    exit_code = 1


class ConfigError(MDEError, ValueError):
    """Bad or unknown configuration (usage error)."""

    exit_code = 1


class DataError(MDEError, ValueError):
    """Malformed input files or datasets violating their invariants."""

    exit_code = 2


class NumericalError(MDEError, ArithmeticError):
    """NaN/Inf in a loss term or gradient."""

    exit_code = 3
