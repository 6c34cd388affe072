"""Exception types shared across the toolkit."""


class ContractViolation(ValueError):
    """Raised when inputs break a documented precondition."""


class NumericFailure(ArithmeticError):
    """Raised when a computation produces non-finite values.

    ``index`` carries the offending batch row or step number when known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class FormatError(ValueError):
    """Raised when a serialized artifact fails validation."""


class ChecksumMismatch(FormatError):
    """Stored CRC does not match the payload."""


class VersionMismatch(FormatError):
    """File was written by an incompatible format version."""
