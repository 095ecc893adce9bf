"""Shared exception types.

The CLI maps these onto exit codes: ConfigError -> 2, TrainingAbort -> 3,
ModelStateError (and subclasses) -> 4. Everything else is a bug.
"""


class GBNFError(Exception):
    """Base class for package errors."""


class ShapeError(GBNFError, ValueError):
    """Array shape or dimension mismatch."""


class NumericError(GBNFError, ArithmeticError):
    """Non-finite value or domain violation inside a computation.

    `where` names the primitive or stage that produced the bad value.
    """

    def __init__(self, where: str, message: str = ""):
        self.where = where
        super().__init__(f"{where}: {message}" if message else where)


class ConfigError(GBNFError, ValueError):
    """Bad config file, bad CLI input, or unusable input data."""


class CheckpointError(ConfigError):
    """Unreadable or incompatible checkpoint file."""


class TrainingAbort(GBNFError, RuntimeError):
    """Training could not proceed (non-finite loss that never recovered)."""


class ModelStateError(GBNFError, RuntimeError):
    """Operation not valid for the model's current state."""


class StalePartitionError(ModelStateError):
    """Multiplicative density requested before the partition estimate."""


class DegenerateProposalError(ModelStateError):
    """Importance-sampling proposal collapsed (effective sample size too low)."""
