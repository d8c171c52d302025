"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, data/format problems with 3, and numeric failures with 4.
"""


class TrepError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(TrepError):
    """Invalid configuration value, file, or checkpoint."""


class ShapeError(ConfigError):
    """Operands with incompatible shapes or dimensions."""


class DataError(TrepError):
    """Malformed or unusable input data."""


class NumericError(TrepError):
    """Numeric failure: domain violation, overflow, or non-finite values."""


class ContractError(TrepError):
    """A caller violated a documented precondition."""
