"""Exception taxonomy shared by all modules.

The CLI maps these to process exit codes: configuration errors exit 1,
data errors exit 2, numerical failures exit 3.
"""


class TbsegError(Exception):
    """Base class for all package errors."""


class ConfigurationError(TbsegError):
    """Invalid configuration: bad hyperparameters, unknown keys, mismatched setups."""

    exit_code = 1


class DataError(TbsegError):
    """Invalid or missing input data: files, label values, empty batches."""

    exit_code = 2


class NumericalError(TbsegError):
    """Numerical failure during optimization (non-finite loss or gradient)."""

    exit_code = 3


class ContractViolationError(TbsegError):
    """A caller broke an API contract (shape/stride mismatch, bad argument)."""

    exit_code = 1
