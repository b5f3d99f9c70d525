"""Exception types shared across the package.

The CLI maps these onto exit codes: config errors exit 2, data and shape
errors exit 3, numeric errors exit 4.
"""


class SfdaError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(SfdaError, ValueError):
    """Invalid hyperparameters, unknown method names, malformed config files."""


class ShapeError(SfdaError, ValueError):
    """Array dimensions do not line up."""


class DataError(SfdaError, ValueError):
    """Input data is empty, missing or otherwise unusable."""


class NumericError(SfdaError, ArithmeticError):
    """A computation produced NaN or Inf."""
