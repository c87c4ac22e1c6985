"""Exception types raised across the package."""


class EpiFusionError(Exception):
    """Base class for all package errors."""


class DepthNonPositive(EpiFusionError, ValueError):
    """A point lies behind or on the image plane of a camera."""


class DegenerateGeometry(EpiFusionError, ValueError):
    """A camera configuration does not constrain the requested quantity."""


class DegenerateBaseline(DegenerateGeometry):
    """Two camera centers coincide."""


class DegenerateRay(DegenerateGeometry):
    """A query ray is parallel to the camera baseline."""


class InvalidDim(EpiFusionError, ValueError):
    """An embedding dimension is incompatible with the requested encoding."""


class ShapeMismatch(EpiFusionError, ValueError):
    """Array shapes disagree with the expected layout."""


class NonFinite(EpiFusionError, FloatingPointError):
    """NaN or Inf encountered in values or gradients."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class FormatError(EpiFusionError, ValueError):
    """A serialized file is corrupt, truncated, or has the wrong version."""
