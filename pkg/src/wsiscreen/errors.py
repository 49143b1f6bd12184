"""Exception hierarchy shared by every stage of the pipeline.

Each class carries the process exit code the CLI maps it to.
"""


class WsiScreenError(Exception):
    exit_code = 1


class ValidationError(WsiScreenError, ValueError):
    """Bad input data: mismatched masks, single-class labels, empty datasets."""

    exit_code = 2


class DimensionError(ValidationError):
    """Tensor or image shapes that do not fit together."""


class RangeError(ValidationError, IndexError):
    """A requested region lies outside the slide level."""


class NumericError(ValidationError, ArithmeticError):
    """NaN or Inf produced or consumed by a numeric routine."""


class ConfigurationError(WsiScreenError):
    exit_code = 4


class SlideIOError(WsiScreenError, OSError):
    exit_code = 3
