"""Exception hierarchy shared by the library and the CLI.

The CLI maps each family to a distinct exit status: validation problems exit
with 2, bad or inconsistent data with 3, numerical failures with 4.
"""


class RFFError(Exception):
    exit_code = 1


class SpecError(RFFError, ValueError):
    """Invalid arguments, configuration or preconditions."""

    exit_code = 2


class DataError(RFFError):
    """Malformed, truncated or mismatched data on disk or in memory."""

    exit_code = 3


class CheckpointError(DataError):
    pass


class NumericError(RFFError, ArithmeticError):
    """Non-finite values encountered during computation."""

    exit_code = 4
