"""Exception hierarchy shared across the package."""


class IncrfError(Exception):
    """Base class for every error raised by this package."""


# geometry
class AngleNearPi(IncrfError):
    pass


class BehindCamera(IncrfError):
    pass


class NonPositiveDepth(IncrfError):
    pass


class DegenerateTrajectory(IncrfError):
    pass


class LengthMismatch(IncrfError):
    pass


class BadIntrinsics(IncrfError):
    pass


# triplane
class OutOfDomain(IncrfError):
    pass


class ShrinkNotAllowed(IncrfError):
    pass


class CheckpointError(IncrfError):
    pass


# renderer
class EmptySampleSet(IncrfError):
    pass


# fba
class ImageTooSmall(IncrfError):
    pass


class AlignmentError(IncrfError):
    """Pose alignment could not produce a trustworthy estimate."""


class SingularSystem(AlignmentError):
    pass


class Diverged(AlignmentError):
    pass


class NoValidPoints(IncrfError):
    pass


# losses
class ShapeMismatch(IncrfError):
    pass


class TooFewSamples(IncrfError):
    pass


class NoValidPixels(IncrfError):
    pass


class NonFiniteComponent(IncrfError):
    pass


# incremental / pipeline
class EmptySequence(IncrfError):
    pass


class EmptyRegistry(IncrfError):
    pass


class DatasetError(IncrfError):
    pass


class MissingFile(DatasetError):
    pass


class DecodeError(DatasetError):
    pass


class BadSpec(IncrfError):
    pass


class TooLarge(IncrfError):
    pass
