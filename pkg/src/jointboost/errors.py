"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 1, data
problems exit 2, numeric failures exit 3.
"""


class JointBoostError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(JointBoostError):
    """Invalid or inconsistent configuration (bad spec, missing reference value)."""


class DataError(JointBoostError):
    """Unusable input data (empty source, corrupt record, mismatched sets)."""


class NumericError(JointBoostError):
    """Numeric failure at runtime (non-finite gradient, non-PSD covariance)."""
