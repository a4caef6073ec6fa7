"""Exception hierarchy shared by every pipeline stage."""


class GraspRefError(Exception):
    """Base class for all package errors."""


class FrameMismatch(GraspRefError):
    pass


class DegenerateRotation(GraspRefError):
    pass


class ShapeMismatch(GraspRefError):
    pass


class EmptyCloud(GraspRefError):
    pass


class DegenerateCloud(GraspRefError):
    pass


class NoCorrespondences(GraspRefError):
    pass


class ObjectOutOfView(GraspRefError):
    pass


class NoFeasibleGrasp(GraspRefError):
    pass


class EmptyMask(GraspRefError):
    pass


class UnknownObject(GraspRefError):
    pass


class ChecksumError(GraspRefError):
    """Raised when a checkpoint or binary file fails its integrity check."""


class ConfigError(GraspRefError):
    pass


class PipelineError(GraspRefError):
    """A component failure tagged with the pipeline stage that raised it."""

    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
