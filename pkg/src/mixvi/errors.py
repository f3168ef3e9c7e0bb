"""Error taxonomy shared across the package.

The CLI maps these onto exit codes: usage/config problems exit 2, data and
file-format problems exit 3, numerical failures exit 4.
"""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class DimensionError(ContractError):
    """Operand shapes do not conform."""


class DomainError(ContractError):
    """Input outside the mathematical domain of the operation (e.g. log of
    a non-positive value)."""


class ConfigError(ContractError):
    """Invalid or inconsistent run configuration."""


class BudgetError(ContractError):
    """Requested work exceeds a configured resource cap."""


class FormatError(ValueError):
    """Malformed input file (bad magic number, truncated payload, ...)."""


class CheckpointError(FormatError):
    """Checkpoint does not match the model it is being loaded into."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values."""


class TrainingError(NumericalError):
    """Training aborted; carries the offending parameter / step context."""


class DegenerateWeightsError(NumericalError):
    """All importance weights are zero; the estimator is undefined."""


class SamplingError(RuntimeError):
    """Rejection sampling failed to produce enough points within its cap."""


class UsageError(ValueError):
    """Bad command-line invocation."""
