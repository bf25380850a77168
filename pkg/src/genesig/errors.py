"""Exception types shared across the package.

The CLI maps these onto distinct exit codes (config=2, data=3, numeric=4),
so raise the most specific class available.
"""


class GenesigError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(GenesigError):
    """Invalid configuration value or flag combination."""


class DataError(GenesigError):
    """Malformed or unusable input data (bad CSV cell, missing labels, ...)."""


class NumericError(GenesigError):
    """Numeric failure at runtime, e.g. divergent training loss."""
