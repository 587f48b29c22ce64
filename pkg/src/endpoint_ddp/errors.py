"""Exception hierarchy shared by the linear-algebra, Riccati and solver layers."""

from __future__ import annotations


class EndpointDDPError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(EndpointDDPError, ValueError):
    pass


class SingularSystem(EndpointDDPError):
    """The full KKT matrix is numerically rank deficient."""


class SingularSchur(EndpointDDPError):
    """The Schur complement ``B A^-1 B^T`` could not be factorized."""


class InconsistentConstraint(EndpointDDPError):
    """A rank-deficient constraint has a right-hand side outside its range."""


class NotPositiveDefinite(EndpointDDPError):
    """A Cholesky factorization failed.

    ``stage`` is set when the failure happened inside a Riccati sweep, so the
    solver can report where the curvature was lost.
    """

    def __init__(self, message: str = "matrix is not positive definite", stage: int | None = None):
        if stage is not None:
            message = f"{message} (stage {stage})"
        super().__init__(message)
        self.stage = stage


class SingularConstraintBlock(EndpointDDPError):
    def __init__(self, message: str = "stagewise constraint block is singular", stage: int | None = None):
        if stage is not None:
            message = f"{message} (stage {stage})"
        super().__init__(message)
        self.stage = stage


class StaleFactorization(EndpointDDPError):
    """The endpoint-dependent sweep was called without retained factors."""


class SingularEndpointOperator(EndpointDDPError):
    """``r_x dX_N`` is singular; the nullspace multiplier must be used instead."""


class InconsistentEndpoint(EndpointDDPError):
    """The endpoint constraint is rank deficient and contradictory."""


class CallbackFailure(EndpointDDPError):
    def __init__(self, message: str, stage: int | None = None):
        if stage is not None:
            message = f"stage {stage}: {message}"
        super().__init__(message)
        self.stage = stage


class NonFiniteState(EndpointDDPError):
    pass


class LineSearchFailure(EndpointDDPError):
    pass


class RegularizationSaturated(EndpointDDPError):
    pass


class UnknownFamily(EndpointDDPError, KeyError):
    pass
