"""Exception hierarchy shared across the package."""


class OmnicError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(OmnicError, ValueError):
    """Shapes or extents are incompatible."""


class NumericError(OmnicError, ArithmeticError):
    """Non-finite values or numerically invalid input."""


class ContractError(OmnicError, ValueError):
    """A call-site precondition was violated."""


class StateError(OmnicError, RuntimeError):
    """An object was used outside its valid lifecycle."""


class ConfigError(OmnicError, ValueError):
    """A configuration value is invalid or inconsistent."""


class DataError(OmnicError, ValueError):
    """Input data violates a documented requirement."""


class FormatError(OmnicError, ValueError):
    """A persisted file is malformed or corrupted."""
