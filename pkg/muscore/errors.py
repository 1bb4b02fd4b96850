"""
Exception hierarchy for the anomaly scoring engine.

Library code raises these; only the CLI turns them into exit codes.
"""


class MuscoreError(Exception):
    """Base class for every engine error."""


# tensor_io
class TensorFormatError(MuscoreError, ValueError):
    """A tensor file is malformed."""


class MagicMismatch(TensorFormatError):
    """File does not start with the tensor magic."""


class ShapeOverflow(TensorFormatError):
    """Declared shape and stored payload disagree."""


class NonFiniteValue(TensorFormatError):
    """A float payload contains NaN or infinity."""


class ShapeMismatch(MuscoreError, ValueError):
    """An array does not have the expected shape."""


# geometry3d
class CountExceedsCloud(MuscoreError, ValueError):
    """Requested more points than the cloud holds."""


class DegenerateNeighborhood(MuscoreError, ValueError):
    """All neighbors coincide; no covariance to analyse."""


# snamd
class EvenDegree(MuscoreError, ValueError):
    """2D aggregation degrees must be odd."""


class DegreeExceedsGroups(MuscoreError, ValueError):
    """3D aggregation degree larger than the number of groups."""


# msm
class DimensionMismatch(MuscoreError, ValueError):
    """Query and gallery stacks disagree on stage count or width."""


class EmptyScoreSet(MuscoreError, ValueError):
    """Interval average over an empty score set."""


class NoAlignmentRoute(MuscoreError, ValueError):
    """Neither an organized map nor intrinsics are available."""


class LengthMismatch(MuscoreError, ValueError):
    """Paired score sets have different lengths."""


class TooManySubsets(MuscoreError, ValueError):
    """More subsets requested than samples available."""


# anomaly_maps
class SpaceMismatch(MuscoreError, ValueError):
    """Maps live in different spaces or shapes."""


class EmptyMap(MuscoreError, ValueError):
    """Classification of an empty map."""


# rescon
class StageCountTooSmall(MuscoreError, ValueError):
    """Salient features need a penultimate stage."""


class WindowTooLarge(MuscoreError, ValueError):
    """Window size outside [1, N-1]."""


# metrics
class SingleClass(MuscoreError, ValueError):
    """Only one label class present."""


class NoPositives(MuscoreError, ValueError):
    """No positive labels present."""


class NoRegions(MuscoreError, ValueError):
    """No ground-truth region to compute overlap on."""


# runtime surface
class InvalidConfig(MuscoreError, ValueError):
    """Configuration values are out of range."""


class MissingArtifacts(MuscoreError):
    """A run directory lacks the files a command needs."""


class ValidationFailed(MuscoreError):
    """Dataset validation reported defects."""

    def __init__(self, report):
        self.report = report
        super().__init__(f"dataset validation failed with {len(report.entries)} issue(s)")
