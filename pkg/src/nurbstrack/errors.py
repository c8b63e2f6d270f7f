"""Exception types shared across the package."""


class NurbsTrackError(Exception):
    """Base class for all package errors."""


class ContractViolationError(NurbsTrackError):
    """An argument violated a documented precondition."""


class DegenerateSurfaceError(NurbsTrackError):
    """A tangent plane or fundamental form is degenerate at the query point."""


class CenterPointError(NurbsTrackError):
    """Angle-based closest point queried at the local origin."""


class SingularCovarianceError(NurbsTrackError):
    """A noise covariance expected to be SPD is not invertible."""


class NumericalFailureError(NurbsTrackError):
    """A matrix factorization failed even after jitter retries."""


class InvalidShapeError(NurbsTrackError):
    """The shape surface does not enclose the local origin."""


class InvalidLayoutError(NurbsTrackError):
    """A surface layout cannot be realized (too few control points, etc.)."""


class InsufficientInitializationError(NurbsTrackError):
    """Too few measurement points to initialize a track."""


class EmptyReportError(NurbsTrackError):
    """Metrics aggregation requested on an empty record list."""


class FrameParseError(NurbsTrackError):
    """A frame or config file could not be parsed; carries location info."""

    def __init__(self, message, line=None, column=None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line
        self.column = column
