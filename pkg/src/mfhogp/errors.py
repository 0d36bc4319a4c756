"""Exception hierarchy shared across the package.

Every error raised on purpose derives from :class:`MfhogpError` and carries a
stable ``category`` string (the class name) so the CLI can emit
machine-readable diagnostics.
"""


class MfhogpError(Exception):
    """Base class for all package errors."""

    @property
    def category(self) -> str:
        return type(self).__name__


class DimensionMismatch(MfhogpError):
    """Operands have incompatible shapes."""


class NotPositiveDefinite(MfhogpError):
    """A matrix failed Cholesky factorization even at the maximum jitter."""


class OverflowingDimensions(MfhogpError):
    """A requested dense object would be too large to build."""


class ConvergenceFailure(MfhogpError):
    """An iterative numerical routine did not converge."""


class IndexOutOfRange(MfhogpError):
    """An index referred outside the valid range."""


class IndexMapInvalid(MfhogpError):
    """A parent index map violates the nested-design contract."""


class InvalidCounts(MfhogpError):
    """Per-fidelity example counts are not positive and decreasing."""


class TooManyParameters(MfhogpError):
    """The finite-difference gradient check refuses oversized models."""


class InvalidStepSize(MfhogpError):
    """A step size that must be positive was not."""


class Diverged(MfhogpError):
    """Training produced a non-finite objective.

    Carries the last finite state so callers can recover it.
    """

    def __init__(self, message, step=None, last_state=None):
        super().__init__(message)
        self.step = step
        self.last_state = last_state


class SolverDiverged(MfhogpError):
    """A PDE solve produced non-finite values or an unacceptable residual."""


class UntrainedModel(MfhogpError):
    """Prediction was requested from a model that has not been fit."""


class DegenerateEnsemble(MfhogpError):
    """An operation needs more predictive samples than were drawn."""


class IoFailure(MfhogpError):
    """A dataset or checkpoint file is missing, truncated, or inconsistent."""
