"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration: mismatched widths, bad counts, unknown kinds."""


class DimensionError(ValueError):
    """Array shapes do not match what the model or measure expects."""


class NumericalError(ArithmeticError):
    """A non-finite loss or gradient was produced."""


class InfeasibleError(ValueError):
    """Requested distortion lies below what the model can achieve."""


class DatasetFormatError(IOError):
    """Malformed, truncated or mismatched data file."""


class ChecksumError(DatasetFormatError):
    """Stored checksum does not match the payload."""
