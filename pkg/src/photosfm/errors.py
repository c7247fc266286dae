"""Exception types shared across the package."""


class PhotoSfmError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(PhotoSfmError, ValueError):
    """Malformed input: bad shapes, out-of-range parameters, unknown keys."""


class IllConditionedError(PhotoSfmError, ValueError):
    """Numerically ill-posed request, e.g. log of a rotation near pi."""


class BehindCameraError(PhotoSfmError, ValueError):
    """Projection of a point with non-positive camera-frame depth."""


class InvalidDepthError(PhotoSfmError, ValueError):
    """Depth values that must be strictly positive are not."""


class EmptySupportError(PhotoSfmError, ValueError):
    """A loss or estimate was requested over zero valid pixels."""


class NonFiniteGradientError(PhotoSfmError, ValueError):
    """An optimizer step received a gradient with NaN or inf entries."""


class DegenerateScaleError(PhotoSfmError, ValueError):
    """Scale alignment or a metric is undefined (zero motion, zero median)."""


class NoGroundPlaneError(PhotoSfmError, ValueError):
    """Ground-plane fit failed: rank-deficient points or no inliers."""
