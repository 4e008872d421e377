"""Exception types shared across the package."""


class XCrossNetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(XCrossNetError):
    """Vector/matrix/layer dimensions do not line up."""


class DataError(XCrossNetError):
    """Malformed input data: bad field counts, labels, or category ids."""


class CheckpointError(XCrossNetError):
    """Checkpoint file is corrupt, truncated, or has an unknown version."""


class SingleClassError(XCrossNetError):
    """AUC requested for a label vector containing only one class."""


class NumericError(XCrossNetError):
    """A non-finite value appeared where the math guarantees finiteness."""
