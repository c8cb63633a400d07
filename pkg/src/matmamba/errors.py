"""Exception hierarchy shared by every module."""


class MatMambaError(Exception):
    pass


class DimensionError(MatMambaError, ValueError):
    """Shapes do not line up for the requested operation."""


class InvalidGranularityError(MatMambaError, ValueError):
    """A Matryoshka dimension does not yield a whole number of heads."""


class NumericError(MatMambaError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class IntegrityError(MatMambaError):
    """Checkpoint bytes are truncated or fail the checksum."""


class SchemaError(MatMambaError):
    """A checkpoint or config document is missing fields or has extra ones."""


class FormatError(MatMambaError):
    """A dataset file has a malformed header or payload."""


class StateError(MatMambaError):
    """An object is used before it holds what the call needs."""
