"""Exception types shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific one that applies.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (bad flag, bad config file)."""


class DataError(ValueError):
    """Unusable input data (missing files, wrong shapes, corrupt manifest)."""


class NumericalError(RuntimeError):
    """Non-finite values where finite ones are required (NaN loss/gradient)."""
