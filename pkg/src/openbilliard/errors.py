"""Exception types shared across the package."""


class OpenBilliardError(Exception):
    """Base class for all package errors."""


class InvalidInputError(OpenBilliardError, ValueError):
    """A precondition on user input is violated (degenerate direction, point
    off the boundary, malformed story, ...)."""


class TangencyAmbiguityError(OpenBilliardError):
    """A trajectory hit a boundary within the tangency tolerance.

    The flow refuses to choose between reflecting and skipping; the offending
    event is attached so the caller can decide.
    """

    def __init__(self, message, event=None):
        super().__init__(message)
        self.event = event


class CausticError(OpenBilliardError):
    """Wavefront transport reached a focal point.  Carries the distance along
    the ray at which the curvature matrix blows up."""

    def __init__(self, message, focal_distance=None):
        super().__init__(message)
        self.focal_distance = focal_distance


class DomainError(OpenBilliardError):
    """Requested point is outside the domain of a reflected phase field
    (no ray with the requested story passes through it)."""


class ProbeFailureError(OpenBilliardError):
    """A numerical probe could not collect enough valid samples."""


class NumericFailureError(OpenBilliardError):
    """A solver failed in a way that is not a clean 'no solution' answer
    (singular Jacobian, non-convergent quadrature, ...)."""


class DegenerateGeometryError(OpenBilliardError):
    """The linearized return map is not hyperbolic."""


class ConfigError(OpenBilliardError):
    """Malformed scene file or run configuration."""
