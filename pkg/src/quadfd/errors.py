"""Exception types shared across the package."""


class QuadFDError(Exception):
    """Base class for all package errors."""


class EvaluationError(QuadFDError):
    """A field evaluation returned a non-finite value or an iteration failed to converge."""


class AssumptionViolated(QuadFDError):
    """A mesh-quality assumption failed (e.g. a leaf edge crosses the boundary twice)."""


class ConfigurationError(QuadFDError):
    """Bad user input: unknown names, invalid parameter combinations."""


class InsufficientResolution(QuadFDError):
    """A stencil quadrant stayed empty even after widening the search radius."""

    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = failures or []


class DegenerateStencil(QuadFDError):
    """The four selected neighbours produce a numerically singular coefficient system."""


class StencilFailure(QuadFDError):
    """Least-squares stencil construction stayed ill-conditioned after all expansions."""


class DivergenceError(QuadFDError):
    """A solver iterate became non-finite."""


class InternalError(QuadFDError):
    """An invariant the implementation relies on was violated."""
