"""Exception types raised across the package."""


class PPCError(Exception):
    """Base class for all package errors."""


class PlacementInfeasible(PPCError):
    pass


class SpanConflict(PPCError):
    pass


class ShapeMismatch(PPCError):
    pass


class InvalidSplit(PPCError):
    pass


class InvalidRank(PPCError):
    pass


class NumericBlowup(PPCError):
    """A sampler or trainer produced non-finite values."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class CheckpointError(PPCError):
    """Malformed checkpoint file; ``offset`` is the byte position of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class DatasetFormatError(PPCError):
    pass


class ConfigError(PPCError):
    pass


class InsufficientSamples(PPCError):
    pass


class CanvasMismatch(PPCError):
    pass
