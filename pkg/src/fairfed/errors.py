"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration and input-format
problems exit 2, numerical failures during a run exit 3.
"""


class FairFedError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FairFedError, ValueError):
    """Operands have incompatible dimensions."""


class ConfigError(FairFedError, ValueError):
    """Invalid configuration value; the message names the offending field."""


class NumericError(FairFedError, ArithmeticError):
    """A computation produced non-finite values."""


class DatasetFormatError(FairFedError, ValueError):
    """A dataset or prediction file is malformed; the message names the line."""


class UndefinedMetricError(FairFedError, ValueError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""
