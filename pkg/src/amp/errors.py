"""Exception hierarchy shared across the package."""


class AmpError(Exception):
    """Base class for all package errors."""


class ShapeError(AmpError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ParameterError(AmpError, ValueError):
    """An argument is outside its valid range."""


class ContractError(AmpError, ValueError):
    """A caller violated an API precondition (non-scalar root, size mismatch, ...)."""


class StateError(AmpError, RuntimeError):
    """An object was used before reaching the required state."""


class ConfigError(AmpError, ValueError):
    """A configuration is internally inconsistent."""


class FormatError(AmpError, ValueError):
    """A serialized artifact has the wrong magic, version or layout."""


class DataError(AmpError, ValueError):
    """Input data is corrupt (NaNs in scores, invalid labels, ...)."""


class NumericError(AmpError, ArithmeticError):
    """A numeric-domain failure that must abort instead of being patched over."""
