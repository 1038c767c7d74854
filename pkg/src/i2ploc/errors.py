"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: usage/config problems exit
with 2, malformed or inconsistent data with 3, numeric failures with 4.
"""


class I2PError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(I2PError):
    """Invalid configuration or argument combination (exit code 2)."""

    exit_code = 2


class DataError(I2PError):
    """Malformed input data, shape mismatch, or broken file (exit code 3)."""

    exit_code = 3


class NumericError(I2PError):
    """Non-finite values or degenerate numerical states (exit code 4)."""

    exit_code = 4
