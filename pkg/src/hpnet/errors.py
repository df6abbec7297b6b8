"""Exception types shared across the package."""


class HPNetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(HPNetError, ValueError):
    """Shapes or ranks of operands are incompatible.

    Messages always name the offending shapes so the caller can see
    what was passed without reproducing the call.
    """


class ContractError(HPNetError, ValueError):
    """A configuration or argument violates a documented requirement."""


class FormatError(HPNetError, ValueError):
    """Serialized data is malformed. Includes a byte offset when known."""


class GraphError(HPNetError, RuntimeError):
    """Misuse of the autodiff graph (e.g. backward from a non-scalar)."""


class TrainingAbort(HPNetError, RuntimeError):
    """Training stopped because the loss or a gradient became unusable."""
