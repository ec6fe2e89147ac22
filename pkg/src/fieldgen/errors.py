"""Exception hierarchy shared by every fieldgen module."""


class FieldgenError(Exception):
    """Base class for all fieldgen errors."""


class DimensionError(FieldgenError, ValueError):
    """Shapes or extents are incompatible with an operation."""


class NumericError(FieldgenError, ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""


class ConfigError(FieldgenError, ValueError):
    """A configuration violates its schema or a stability bound."""


class ParameterError(FieldgenError, ValueError):
    """A scalar argument lies outside its admissible range."""


class GeometryError(FieldgenError, ValueError):
    """A source rectangle does not fit inside the domain."""


class CorruptionError(FieldgenError):
    """Stored bytes do not match their recorded digest or length."""


class FormatError(FieldgenError):
    """A file carries an unknown magic number or format version."""


class SplitError(FieldgenError):
    """Train and held-out splits overlap."""
