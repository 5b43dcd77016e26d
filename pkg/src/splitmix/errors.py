"""Exception types shared across the package."""


class SplitMixError(Exception):
    """Base class for all package errors."""


class DimensionError(SplitMixError, ValueError):
    """Shapes of operands are incompatible with the requested operation."""


class ContractError(SplitMixError, ValueError):
    """An argument violates a documented precondition."""


class ProtocolError(SplitMixError, RuntimeError):
    """A message or round-level invariant was violated; names the offender."""


class IngestionError(SplitMixError, RuntimeError):
    """A dataset file is missing, truncated, or carries invalid values."""
