"""Exception hierarchy for crowdcount.

Every error raised on purpose by the package derives from ``CrowdCountError``
and carries the process exit code the CLI reports for it.
"""


class CrowdCountError(Exception):
    """Base class for all crowdcount errors."""

    exit_code = 1


class ConfigError(CrowdCountError, ValueError):
    """Invalid configuration key, value or invariant."""

    exit_code = 2


class ShapeError(CrowdCountError, ValueError):
    """Tensor or grid dimensions do not fit the operation."""

    exit_code = 2


class ContractError(CrowdCountError, RuntimeError):
    """A documented precondition was violated by the caller."""

    exit_code = 2


class CheckpointMismatchError(ConfigError):
    """A checkpoint does not match the model it is loaded into."""

    def __init__(self, name, message):
        super().__init__(f"{name}: {message}")
        self.name = name


class NumericAbort(CrowdCountError, ArithmeticError):
    """A NaN or Inf appeared in a forward value or in the loss."""

    exit_code = 3


class DatasetIOError(CrowdCountError, OSError):
    """Reading or writing a dataset, image or checkpoint failed."""

    exit_code = 4


class ParseError(DatasetIOError):
    """A file is malformed; ``offset`` is the byte position of the problem."""

    def __init__(self, path, offset, message):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset
