"""Exception hierarchy shared by all voxcnn modules."""


class VoxcnnError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(VoxcnnError):
    """A shape, configuration, or data-integrity check failed."""


class NumericError(VoxcnnError):
    """A computation produced or received non-finite values."""
