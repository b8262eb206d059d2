"""Exception types shared across the toolkit."""


class SinkToolkitError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(SinkToolkitError, ValueError):
    """Tensor shapes or extents do not line up."""


class ArgumentError(SinkToolkitError, ValueError):
    """An argument is outside the accepted domain."""


class NumericError(SinkToolkitError, ArithmeticError):
    """A computation produced a non-finite value."""


class FormatError(SinkToolkitError, ValueError):
    """A file or checkpoint does not match the expected layout."""


class CorruptionError(FormatError):
    """A checkpoint failed its checksum."""


class FreezeViolation(SinkToolkitError, RuntimeError):
    """A parameter group that should be frozen changed during training."""
