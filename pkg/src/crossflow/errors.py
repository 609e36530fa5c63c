"""Exception types shared across the package.

Each maps onto a failure class the CLI translates into an exit code:
configuration and usage problems exit 2, everything else exits 1.
"""


class CrossflowError(Exception):
    """Base class for all package errors."""


class DimensionError(CrossflowError, ValueError):
    """Tensor or image shapes do not fit together."""


class ContractError(CrossflowError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigurationError(CrossflowError, ValueError):
    """Invalid configuration values or an unusable setup."""


class ValidationError(CrossflowError, ValueError):
    """Input data on disk or in memory failed validation."""


class DegenerateInputError(CrossflowError, ValueError):
    """Statistics requested on data with no variance."""


class TrainingError(CrossflowError, RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class SelectionError(CrossflowError, RuntimeError):
    """No successful sweep configuration to select from."""


class SweepError(CrossflowError, RuntimeError):
    """Every configuration in a sweep failed."""
