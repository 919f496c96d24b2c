"""Exception types shared across the package.

The CLI maps these onto process exit codes: UsageError -> 1,
DataError -> 2, NumericalError -> 3.
"""


class UsageError(Exception):
    """Bad invocation: unknown flags, missing required arguments."""


class DataError(Exception):
    """Malformed or inconsistent input data: corpora, vocabularies,
    checkpoints, metric logs."""


class NumericalError(Exception):
    """A computation produced NaN or Inf, or training diverged."""
