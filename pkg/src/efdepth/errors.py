"""Exception types shared across the package.

The CLI maps ConfigError/DataError to exit code 2 and verification
failures to exit code 1.
"""


class ConfigError(ValueError):
    """Invalid configuration value or incompatible option combination."""


class DataError(ValueError):
    """Malformed input data (files, streams, rasters)."""
