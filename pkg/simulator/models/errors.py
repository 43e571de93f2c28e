"""Exception hierarchy shared by the simulator services"""


class ReconError(Exception):
    """Base class for every error raised by the simulator"""


class DomainError(ReconError, ValueError):
    """An input violates a documented invariant or precondition"""


class BoundaryError(DomainError):
    """A grid query falls outside the sampleable interior"""


class EmptySampleError(DomainError):
    """A depth frame has no valid pixel to train from"""


class NumericError(ReconError, ArithmeticError):
    """A computation produced a non-finite intermediate"""


class UnreachableGoalError(ReconError):
    """No path exists to the requested goal on any available graph"""

    def __init__(self, message: str, goal_region: int | None = None):
        super().__init__(message)
        self.goal_region = goal_region


class NoGoalError(ReconError):
    """Neither a usable global goal nor any target viewpoint is available"""
