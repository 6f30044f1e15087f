class RangePdmError(Exception):
    """Base class for all package errors."""


class FormatError(RangePdmError):
    """A file does not match its binary layout."""


class DataError(RangePdmError):
    """Input values are well-formed but semantically invalid."""


class NumericalError(RangePdmError):
    """Training produced a non-finite value."""
