"""Exception types shared across the package.

The CLI maps ValidationError (and subclasses) to exit code 1 and every
other SongdiscError to exit code 2.
"""


class SongdiscError(Exception):
    """Base class for all songdisc errors."""


class InputError(SongdiscError):
    """An input file is unreadable or not in a supported format."""


class ValidationError(SongdiscError):
    """Arguments or data violate a documented precondition."""


class FormatError(SongdiscError):
    """A songdisc container file is corrupt or truncated."""


class NumericError(SongdiscError):
    """Non-finite values where finite ones are required."""


class BackendError(SongdiscError):
    """A clustering backend failed; message echoes the parameters used."""


class TrainingDiverged(SongdiscError):
    """Training aborted on a non-finite loss; carries the diagnostic record."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
