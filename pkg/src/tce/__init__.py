"""Target-aligned coverage expansion for cross-domain offline RL, with exact analytic checks."""

from .errors import ChecksumMismatch, ContractViolation, FormatError, NumericFailure, VersionMismatch

__all__ = ["ChecksumMismatch", "ContractViolation", "FormatError", "NumericFailure", "VersionMismatch"]
__version__ = "0.1.0"
