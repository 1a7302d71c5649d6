"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage errors -> 1,
data errors -> 2, numeric failures -> 3.
"""


class MvlabError(Exception):
    """Base class for all package errors."""


class ShapeError(MvlabError):
    """Operand shapes are incompatible; message names the offending dims."""


class ConfigError(MvlabError):
    """Invalid or inconsistent configuration."""


class DataError(MvlabError):
    """Base class for dataset container problems (CLI exit code 2)."""


class BadMagicError(DataError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(DataError):
    """File is shorter than its header arithmetic requires."""


class LabelRangeError(DataError):
    """A stored class label is outside [0, n_classes)."""


class NumericError(MvlabError):
    """Non-finite value where a finite one is required (CLI exit code 3)."""


class NotFittedError(MvlabError):
    """Estimator method called before fit()."""
