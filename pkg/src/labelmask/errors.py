"""Exception types shared across the package."""


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigurationError(ValueError):
    """A config value is outside its documented domain."""


class ProtocolError(ValueError):
    """An evaluation or training protocol was used inconsistently."""


class NumericsError(ArithmeticError):
    """A non-finite value appeared where the math requires finite ones."""


class TapeStateError(RuntimeError):
    """The gradient tape was used out of order (reuse, missing loss, ...)."""


class FormatError(ValueError):
    """A serialized file is truncated, corrupt, or of an unknown version."""
