"""Exception types shared across the package.

The CLI maps these to exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class ConfigError(Exception):
    """Bad or unknown configuration key/value."""


class DataError(Exception):
    """Malformed input data (files, clouds, labels)."""


class NumericError(Exception):
    """Non-finite loss, failed gradient check, or similar numeric failure."""
