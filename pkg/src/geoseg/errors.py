"""Exception types shared across the package."""


class GeosegError(Exception):
    """Base class for all errors raised by geoseg."""


class InvalidCalibration(GeosegError):
    pass


class CalibrationParseError(InvalidCalibration):
    pass


class Unprojectable(GeosegError):
    """A point lies at or behind the camera plane."""


class DegenerateHorizon(GeosegError):
    pass


class QuadBehindCamera(GeosegError):
    pass


class EmptyRegion(GeosegError):
    """A partial mask has no ROAD or no NONROAD pixels."""


class DecodeError(GeosegError):
    pass


class SizeMismatch(GeosegError, ValueError):
    pass


class ImageTooSmall(GeosegError, ValueError):
    pass


class EmptyBatch(GeosegError, ValueError):
    pass


class BadShape(GeosegError, ValueError):
    pass


class NoPairs(GeosegError):
    pass


class InvalidSpec(GeosegError, ValueError):
    pass


class ConfigError(GeosegError, ValueError):
    pass
