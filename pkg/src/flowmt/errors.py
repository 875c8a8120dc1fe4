"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: usage/configuration problems
exit 1, data problems exit 2, numeric failures exit 3.
"""


class FlowmtError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(FlowmtError):
    """The caller invoked an operation incorrectly (bad arguments, empty input)."""


class ConfigurationError(UsageError):
    """A config value or model wiring is invalid (dimension mismatch, unknown key)."""


class DataError(FlowmtError):
    """Input data could not be read or violates the expected format."""


class NumericError(FlowmtError):
    """A computation produced non-finite values or an otherwise unusable result."""
