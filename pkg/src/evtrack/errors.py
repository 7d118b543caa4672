"""Exception hierarchy shared by all evtrack modules."""


class EvtrackError(Exception):
    pass


class GeometryError(EvtrackError, ValueError):
    pass


class NonPositiveDepth(GeometryError):
    pass


class DegenerateInterval(GeometryError):
    pass


class BehindCamera(GeometryError):
    pass


class MeasurementUnavailable(EvtrackError):
    """The measurement for an event could not be evaluated; the event is skipped."""


class OutOfBounds(MeasurementUnavailable, GeometryError):
    pass


class InvalidDepth(MeasurementUnavailable):
    pass


class NoPriorEvent(MeasurementUnavailable):
    pass


class NoPriorPose(MeasurementUnavailable):
    pass


class NonFinite(MeasurementUnavailable):
    pass


class InsufficientOverlap(EvtrackError):
    pass


class NoOverlap(EvtrackError):
    pass


class ParseError(EvtrackError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class DimensionMismatch(EvtrackError, ValueError):
    pass


class UnknownKey(ParseError):
    pass
