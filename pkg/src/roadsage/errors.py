"""Exception hierarchy.

Two families matter to the command line: ``ConfigError`` (exit code 1) and
``DataError`` (exit code 2). ``NumericError`` maps to exit code 3.
"""


class RoadSageError(Exception):
    """Base class for all package errors."""


class ConfigError(RoadSageError, ValueError):
    pass


class DataError(RoadSageError, ValueError):
    pass


class NumericError(RoadSageError, ArithmeticError):
    pass


class ParseError(DataError):
    pass


class ReferentialError(DataError):
    pass


class DuplicateIdError(DataError):
    pass


class DegenerateGeometryError(DataError):
    pass


class DomainError(DataError):
    pass


class AttributeMissingError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class EmptyPatchError(DataError):
    """No raster cell centre falls inside the footprint (or all are nodata)."""


class InvalidRangeError(DataError):
    pass


class LabelError(DataError):
    pass


class SplitError(DataError):
    pass


class EmptyGroupError(DataError):
    pass


class ShapeError(RoadSageError, ValueError):
    pass


class StaleCacheError(RoadSageError, RuntimeError):
    """Backward pass attempted with activations from an older parameter set."""
