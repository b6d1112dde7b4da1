"""Error taxonomy shared across the package.

The command line maps these onto exit codes: parameter, dimension and
state errors are usage problems (exit 1), data and format errors come
from the inputs (exit 2), numeric failures mean a non-finite value was
produced (exit 3).
"""


class SemidError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(SemidError, ValueError):
    """An argument or configuration value is out of its documented range."""


class DimensionError(SemidError, ValueError):
    """Array shapes do not line up."""


class StateError(SemidError, RuntimeError):
    """Operation invoked before the state it needs exists (e.g. unfitted model)."""


class ContractError(SemidError, RuntimeError):
    """An internal precondition was violated by the caller."""


class DataError(SemidError):
    """Input data violates a documented requirement."""


class FormatError(DataError):
    """A file's content is malformed."""


class NumericError(SemidError, ArithmeticError):
    """A computation produced NaN or Inf."""
