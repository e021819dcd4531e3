"""Exception hierarchy shared across the package."""


class VExpressError(Exception):
    """Base class for all package errors."""


class InvalidInputError(VExpressError, ValueError):
    """An argument violates an operation's preconditions."""


class ShapeError(InvalidInputError):
    """Array dimensions are inconsistent with the declared contract."""


class ConfigurationError(VExpressError, ValueError):
    """A configuration value or combination of values is unusable."""


class DegenerateGeometryError(InvalidInputError):
    """Keypoint geometry collapses (e.g. zero eye-to-nose distance)."""


class DetectionError(VExpressError, RuntimeError):
    """A marker expected in a rendered frame could not be found."""


class DataError(VExpressError, RuntimeError):
    """Dataset is missing, exhausted, or malformed."""


class StageOrderError(VExpressError, RuntimeError):
    """A training stage was requested before its prerequisite checkpoint exists."""


class FormatError(VExpressError, ValueError):
    """A serialized artifact (VXT container, kps JSON, ...) is malformed."""
