"""Exception hierarchy shared across the package.

The CLI maps these onto exit-code categories: config errors (bad flags,
unknown methods, inconsistent scene specs), io errors (unreadable or
malformed files), contract errors (violated preconditions, shape
mismatches) and numeric errors (divergence).
"""


class BeltcamError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(BeltcamError):
    """Invalid configuration value or combination."""


class ContractError(BeltcamError):
    """A documented precondition was violated by the caller."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class DataFormatError(BeltcamError):
    """A file on disk does not match its expected format."""


class NumericError(BeltcamError):
    """Computation produced non-finite values."""
