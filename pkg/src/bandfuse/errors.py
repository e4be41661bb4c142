"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: usage problems exit 1,
data/format problems exit 2, numeric failures exit 3.
"""


class BandfuseError(Exception):
    """Base class for all package errors."""


class UsageError(BandfuseError):
    """Caller misuse: bad flags, wrong call order, non-scalar loss."""


class ParameterError(UsageError):
    """Invalid hyperparameter value (e.g. non-positive temperature)."""


class ShapeError(BandfuseError):
    """Tensor shape mismatch; message names both shapes."""


class GeometryError(BandfuseError):
    """Band/patch geometry violates a divisibility constraint."""


class DataError(BandfuseError):
    """Sample content inconsistent with the configured bands."""


class DataFormatError(BandfuseError):
    """On-disk container or checkpoint is malformed."""


class NumericError(BandfuseError):
    """Non-finite value produced where finiteness is required."""
