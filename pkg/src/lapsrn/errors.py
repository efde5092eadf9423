"""Exception hierarchy shared across the package."""


class LapSRNError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(LapSRNError, ValueError):
    """A caller passed a value that violates an operation's preconditions."""


class NumericError(LapSRNError, ArithmeticError):
    """A NaN or infinity showed up where only finite values are allowed."""


class CapabilityError(LapSRNError):
    """A model was asked for a scale it cannot produce."""


class CheckpointError(LapSRNError):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    """Wrong magic bytes or an unparseable header."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class DataError(LapSRNError):
    """Unreadable images, empty corpora, missing manifest entries."""
