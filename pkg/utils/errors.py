"""
Domain exceptions for the tomography pipeline.

Every stage raises a subclass of QtomoError so that the CLI and the HTTP
surface can map failures to exit codes / status codes in one place.
"""


class QtomoError(Exception):
    """Base class for all pipeline errors."""
    pass


class ConfigError(QtomoError, ValueError):
    """Run configuration is invalid."""
    pass


class DimensionMismatchError(QtomoError, ValueError):
    """Operands live in spaces of different dimension."""
    pass


class UnphysicalStateError(QtomoError, ValueError):
    """Matrix is not Hermitian, not unit-trace or not positive semidefinite."""
    pass


class ForbiddenTransitionError(QtomoError, ValueError):
    """The (f, F) pair is not dipole-allowed or not supported by a module."""
    pass


class ModelValidityError(QtomoError):
    """Probe parameters leave the regime of the analytic signal model."""

    def __init__(self, message: str, flags=None):
        super().__init__(message)
        self.flags = flags or {}


class SingularDesignError(QtomoError):
    """Envelope design matrix is (numerically) rank deficient."""
    pass


class ChannelDeadError(QtomoError):
    """A signal channel carries no information for the given detuning."""
    pass


class EmptyMeasurementError(QtomoError, ValueError):
    """Objective requested without any partial measurement."""
    pass


class IntegrationError(QtomoError):
    """Master-equation integration failed (step-size underflow, stiffness)."""

    def __init__(self, message: str, method: str = "", t_failed: float = float("nan"), nfev: int = 0):
        super().__init__(message)
        self.method = method
        self.t_failed = t_failed
        self.nfev = nfev


class DegenerateSampleError(QtomoError, ValueError):
    """Too few or invalid samples for a distribution fit."""
    pass
