"""Exception types shared across the package."""


class OloraError(Exception):
    """Base class for all package errors."""


class ShapeError(OloraError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(OloraError):
    """An operation was called in a way that violates its contract."""


class ConfigError(OloraError):
    """A configuration value violates an invariant."""


class StateError(OloraError):
    """An operation was applied to an object in the wrong state."""


class DataError(OloraError):
    """Input data is malformed (non-finite losses, NaN candidates, ...)."""


class DomainError(OloraError):
    """A quantity is undefined for the given inputs (e.g. too few tasks)."""
