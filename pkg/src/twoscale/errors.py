"""Exception hierarchy shared by all modules."""


class TwoScaleError(Exception):
    """Base class for every error raised by the package."""


class ParameterError(TwoScaleError, ValueError):
    """An input violates a documented precondition."""


class StepSizeError(ParameterError):
    """The requested time step violates a stability bound."""

    def __init__(self, message, required):
        super().__init__(message)
        self.required = required


class BlowUpError(TwoScaleError, FloatingPointError):
    """A simulated state became non-finite."""

    def __init__(self, message, time, state):
        super().__init__(message)
        self.time = time
        self.state = state


class MonotonicityError(TwoScaleError):
    """A finite-difference stencil lost the monotone (M-matrix) property."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class EllipticityError(TwoScaleError):
    """A Hamiltonian failed the degenerate-ellipticity probe."""


class QuadratureError(TwoScaleError):
    """A deterministic quadrature could not certify its accuracy."""
