"""Exception types shared across the package."""


class SSIRError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(SSIRError, ValueError):
    pass


class ShapeError(SSIRError, ValueError):
    pass


class InsufficientDataError(SSIRError, ValueError):
    pass


class InfeasibleTargetError(SSIRError, ValueError):
    """A CTC target cannot be aligned to the available number of frames."""

    def __init__(self, message, sample_id=None):
        super().__init__(message)
        self.sample_id = sample_id


class NumericsError(SSIRError, FloatingPointError):
    pass


class FormatError(SSIRError):
    """A container or checkpoint file is malformed.

    ``offset`` is the byte offset (from the start of the file) at which the
    problem was detected, or None when the problem is not positional.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
