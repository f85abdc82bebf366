"""Exception types shared across the package."""


class FlowregError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(FlowregError):
    """An argument is malformed (non-finite, out of range, wrong kind)."""


class ShapeError(FlowregError):
    """Grids or array shapes of the operands do not match."""


class DegenerateInputError(FlowregError):
    """Input is degenerate for the requested operation (e.g. zero variance)."""


class SingularTransformError(FlowregError):
    """An affine transform required to be invertible is singular."""


class ConfigurationError(FlowregError):
    """A pipeline or config references something that does not exist."""


class NumericError(FlowregError):
    """A non-finite value appeared during evaluation."""
