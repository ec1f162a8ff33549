"""Exception hierarchy shared by every module."""


class GeoScatterError(Exception):
    """Base class for all package errors."""


class SceneError(GeoScatterError, ValueError):
    """Malformed or inconsistent scene description."""


class NonPositiveDefinite(SceneError):
    pass


class OverlappingDisks(SceneError):
    pass


class UnsupportedDim(SceneError):
    pass


class ZeroVector(GeoScatterError, ValueError):
    pass


class BadComponentIndex(GeoScatterError, IndexError):
    pass


class OutsideCollar(GeoScatterError):
    pass


class StepLeftCollar(GeoScatterError):
    pass


class EventRefinementFailed(GeoScatterError):
    pass


class NoOracle(GeoScatterError):
    pass


class CollarTooNarrow(GeoScatterError):
    pass


class NotInward(GeoScatterError, ValueError):
    """A boundary state handed to the scattering map does not point into M."""


class IncompatibleGrid(GeoScatterError):
    pass


class BallTooSmall(GeoScatterError):
    pass


class EndpointMismatch(GeoScatterError):
    pass


class PhiNotInward(GeoScatterError):
    pass


class SegmentNotInTable(GeoScatterError):
    pass


class NegativeInput(GeoScatterError, ValueError):
    pass


class NoCoveringTheta(GeoScatterError):
    pass


class NotFound(GeoScatterError):
    pass
