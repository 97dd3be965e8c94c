"""Exception types raised across hfloc.

Everything derives from HflocError so the CLI can map domain failures to
exit code 1 without catching programming errors.
"""


class HflocError(Exception):
    pass


# geometry
class BehindCamera(HflocError):
    pass


class DegenerateBaseline(HflocError):
    pass


class RayDivergence(HflocError):
    """Triangulation angle below the configured minimum."""


class AtInfinity(HflocError):
    pass


# features / retrieval
class ZeroVector(HflocError):
    pass


class EmptyIndex(HflocError):
    pass


class DimensionMismatch(HflocError):
    pass


# map
class MissingPose(HflocError):
    pass


class MissingFeatures(HflocError):
    pass


class UnknownImage(HflocError):
    pass


class EmptyMap(HflocError):
    pass


class EmptyPlace(HflocError):
    pass


class VersionMismatch(HflocError):
    pass


class CorruptFile(HflocError):
    pass


# pose
class DegenerateConfiguration(HflocError):
    pass


class TooFewCorrespondences(HflocError):
    pass


# evaluation
class NoVisibleKeypoints(HflocError):
    pass


class MissingGroundTruth(HflocError):
    pass


# distillation
class ShapeMismatch(HflocError):
    pass


class NonSimplexTarget(HflocError):
    pass


# synthetic scenes
class NoVisiblePoints(HflocError):
    pass


class RankDeficientWarning(UserWarning):
    pass
