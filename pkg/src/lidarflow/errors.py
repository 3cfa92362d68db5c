"""Exception taxonomy shared across the package."""


class LidarFlowError(Exception):
    """Base class for all package errors."""


class ShapeError(LidarFlowError):
    """Tensor or field dimensions do not match the operation's contract."""


class GeometryError(LidarFlowError):
    """A requested geometry is unrealizable (non-positive size, infeasible schedule)."""


class FormatError(LidarFlowError):
    """A file does not conform to its declared binary format."""


class EmptyMaskError(LidarFlowError):
    """An operation requiring at least one valid pixel received none."""


class DegenerateSampleError(LidarFlowError):
    """A training sample carries no supervision at any loss site."""


class ReentrancyError(LidarFlowError):
    """backward() invoked twice on the same graph without a reset."""


class NonFiniteError(LidarFlowError):
    """A NaN or Inf appeared where only finite values are allowed."""
