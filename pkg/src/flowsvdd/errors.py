"""Exception types shared across the package."""


class FlowSVDDError(Exception):
    """Base class for all package errors."""


class DimensionError(FlowSVDDError, ValueError):
    """Shapes or dimensionalities are incompatible."""


class ContractError(FlowSVDDError, ValueError):
    """A precondition on the arguments of an operation was violated."""


class NumericError(FlowSVDDError, ArithmeticError):
    """A computation produced (or would produce) a non-finite value."""


class DataError(FlowSVDDError, ValueError):
    """Input data could not be ingested."""
