"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class EmptyInputError(ValueError):
    """Operation needs at least one row / point and got none."""


class StateError(RuntimeError):
    """Object is in the wrong state for the call (e.g. backward run twice)."""


class ConfigError(ValueError):
    """Configuration value violates an invariant; message names the field."""


class FormatError(ValueError):
    """Binary input does not match the expected layout."""


class ParseError(ValueError):
    """Text input could not be parsed; message carries the position."""


class DomainError(ValueError):
    """Metric input is outside the metric's domain."""
