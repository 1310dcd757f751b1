"""Exception types raised across the package."""


class Perspective3DError(Exception):
    """Base class for all package errors."""


class BehindCamera(Perspective3DError):
    """A point has non-positive depth in the camera frame."""


class DegenerateLine(Perspective3DError):
    """Two points defining a line coincide."""


class NonFinite(Perspective3DError):
    """A loss evaluated to NaN or infinity."""


class InsufficientData(Perspective3DError):
    """Fewer examples than templates for a class."""


class NoGroundTruth(Perspective3DError):
    """Average precision requested for a class without ground truth."""


class RejectionOverflow(Perspective3DError):
    """Scene sampling exceeded its rejection budget."""


class ConfigError(Perspective3DError):
    """A configuration file or value failed validation."""
