"""Exception hierarchy shared by all vesselkit modules."""


class VesselkitError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(VesselkitError, ValueError):
    """Array dimensions are missing, mismatched, or too small."""


class ParameterError(VesselkitError, ValueError):
    """An argument or configuration value is out of its valid range."""


class DegenerateInputError(VesselkitError, ValueError):
    """Input is technically valid but carries no usable information
    (constant volume, empty point set, ...)."""


class NumericError(VesselkitError, ArithmeticError):
    """A computation produced NaN or Inf."""


class FileFormatError(VesselkitError, ValueError):
    """A file does not match its declared on-disk format."""


class TruncatedFileError(FileFormatError, OSError):
    """A file ended before all declared payload bytes were read."""


class UndefinedMetricError(VesselkitError, ValueError):
    """A metric's denominator is zero; the value is undefined, not 0 or 1."""
