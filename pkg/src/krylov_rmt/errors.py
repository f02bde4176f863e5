"""Exception types raised by the package."""

from __future__ import annotations


class KrylovRMTError(Exception):
    """Base class for all package errors."""


class PoleProximityError(KrylovRMTError, ValueError):
    """An evaluation point lies too close to a pole of ``f``."""


class ConvergenceError(KrylovRMTError, RuntimeError):
    """An iterative solver did not converge."""


class BranchError(KrylovRMTError, RuntimeError):
    """A root landed on the wrong sheet of the inverse relation."""


class UnsupportedRegimeError(KrylovRMTError, ValueError):
    """The model falls outside the single-bulk regime handled here."""


class BracketError(KrylovRMTError, RuntimeError):
    """No sign change could be bracketed for a root search."""


class ContourError(KrylovRMTError, RuntimeError):
    """A contour integral failed its mass consistency check."""


class MomentInconsistencyError(KrylovRMTError, ValueError):
    """A moment sequence is not that of a positive measure."""


class ConditioningError(KrylovRMTError, ValueError):
    """A request exceeds the conditioning guard of a numerical route."""


class NotPositiveDefiniteError(KrylovRMTError, ValueError):
    """A matrix expected to be positive definite is not."""


class InconsistentMomentError(KrylovRMTError, ValueError):
    """A supplied inverse moment contradicts the Cholesky data."""
