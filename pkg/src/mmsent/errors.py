"""Exception taxonomy shared by every mmsent module."""


class MmsentError(Exception):
    """Base class for all package errors."""


class DimensionError(MmsentError):
    """Shapes or widths of operands do not line up."""


class ContractError(MmsentError):
    """A precondition of an operation was violated by the caller."""


class ConfigError(MmsentError):
    """A configuration value is missing, unknown, or out of range."""


class DataError(MmsentError):
    """Corpus or manifest content violates a declared invariant."""


class FormatError(MmsentError):
    """A binary or text file does not match its declared format."""


class DomainError(MmsentError):
    """An input lies outside the mathematical domain of the operation."""


class NumericError(MmsentError):
    """A computation produced NaN or Inf, or was aborted to avoid it."""


class OracleError(MmsentError):
    """A verification oracle detected an unusable check setup."""
