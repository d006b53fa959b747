"""Exception types shared across the package.

Every domain failure derives from :class:`FisheyeDepthError` so the CLI can
report it as a single machine-parsable line (``error: <Kind>: <message>``).
"""

from __future__ import annotations


class FisheyeDepthError(Exception):
    """Base class for all domain errors."""

    @property
    def kind(self) -> str:
        return type(self).__name__


# camera model
class ProjectionFailure(FisheyeDepthError):
    pass


class ZeroNormPoint(ProjectionFailure):
    pass


class BehindCamera(ProjectionFailure):
    pass


class NoConvergence(FisheyeDepthError):
    pass


class NonMonotonicDomain(FisheyeDepthError):
    pass


class NoRealRoot(FisheyeDepthError):
    pass


class NonPositiveDistance(FisheyeDepthError):
    pass


class InvalidIntrinsics(FisheyeDepthError, ValueError):
    pass


class CalibrationParseError(FisheyeDepthError, ValueError):
    pass


# ray cache
class OutOfBounds(FisheyeDepthError, IndexError):
    pass


class InvalidRay(FisheyeDepthError):
    pass


class IoFailure(FisheyeDepthError, OSError):
    pass


class FormatVersionMismatch(FisheyeDepthError):
    pass


class DimensionMismatch(FisheyeDepthError, ValueError):
    pass


# pose
class InvalidTransform(FisheyeDepthError, ValueError):
    pass


class MissingFrame(FisheyeDepthError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class PoseParseError(FisheyeDepthError, ValueError):
    pass


# view synthesis / losses
class EmptyMask(FisheyeDepthError, ValueError):
    pass


class EmptyInput(FisheyeDepthError, ValueError):
    pass


# multi-channel head
class ShapeMismatch(FisheyeDepthError, ValueError):
    pass


class InconsistentScales(FisheyeDepthError, ValueError):
    pass


# estimator
class NoParallax(FisheyeDepthError):
    pass


# metrics
class NonPositiveGroundTruth(FisheyeDepthError, ValueError):
    pass


# io
class UnsupportedFormat(FisheyeDepthError, ValueError):
    pass


class CorruptFile(FisheyeDepthError, ValueError):
    pass


class MissingCalibration(FisheyeDepthError):
    pass


class MissingPoseForFrame(FisheyeDepthError):
    pass


class UnreadableImage(FisheyeDepthError):
    pass


class SceneParseError(FisheyeDepthError, ValueError):
    pass


class LossyConversion(FisheyeDepthError):
    pass
