"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage/config -> 1, data/format/shape -> 2,
numerical failure -> 3.
"""


class VesselSegError(Exception):
    """Base class for all package errors."""


class UsageError(VesselSegError):
    """Invalid API usage or command-line invocation."""


class ConfigError(UsageError):
    """Invalid or inconsistent configuration value."""


class SplitError(UsageError):
    """Dataset cannot be partitioned as requested."""


class DimensionError(VesselSegError):
    """Tensor or mask shapes are incompatible with the operation."""


class DataFormatError(VesselSegError):
    """A file on disk does not conform to its declared format."""


class NumericalError(VesselSegError):
    """A computation produced NaN/Inf or an otherwise invalid number."""


class EmptyMaskError(VesselSegError):
    """A surface-distance metric was asked to measure an empty point set."""
