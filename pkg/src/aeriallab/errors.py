"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to:
2 = bad configuration or parameters, 3 = I/O failure,
4 = numeric failure (NaN/Inf, singular system, horizon crossing),
5 = broken call contract (shape mismatch, misuse of an API).
"""


class AerialLabError(Exception):
    exit_code = 1


class ConfigError(AerialLabError):
    """Invalid configuration value or file."""

    exit_code = 2


class ParameterError(ConfigError):
    """Invalid argument to an operation (bad kernel size, eps, ...)."""


class SizeError(ConfigError):
    """An input is too small for the requested operation."""


class IOFailure(AerialLabError):
    """Unreadable input or unwritable output path."""

    exit_code = 3


class NumericError(AerialLabError):
    """NaN/Inf encountered where finite values are required."""

    exit_code = 4


class EstimationError(NumericError):
    """A linear system was singular or too ill-conditioned to solve."""


class HorizonError(NumericError):
    """A projective mapping was evaluated at (or too near) its horizon line."""


class ContractError(AerialLabError):
    """An API was called outside its documented contract."""

    exit_code = 5


class ShapeError(ContractError):
    """Operand shapes do not fit the operation."""


class DomainError(ContractError):
    """A value lies outside the mathematical domain of the operation."""


class DegenerateQuadError(DomainError):
    """Four points that do not form a usable quadrilateral."""
