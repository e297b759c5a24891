"""Exception types shared across the package."""


class MabvitError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(MabvitError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(MabvitError, ValueError):
    """A configuration object violates one of its invariants."""


class GraphError(MabvitError, RuntimeError):
    """backward() was called on a tensor with no computation graph."""


class NumericError(MabvitError, ArithmeticError):
    """A computation produced a non-finite value where finiteness is required."""


class FormatError(MabvitError, ValueError):
    """A dataset or checkpoint file is malformed."""


class TrainingDiverged(MabvitError, RuntimeError):
    """Training aborted because the loss became non-finite."""
