"""Exception hierarchy. Each class maps to a distinct CLI exit code."""


class DisperseError(Exception):
    exit_code = 1


class ConfigError(DisperseError, ValueError):
    exit_code = 2


class StabilityError(DisperseError, ValueError):
    """An arrival law with mean rate >= 1 (or p_0 = 0 where division by it is needed)."""

    exit_code = 3


class TruncationError(DisperseError):
    """Probability mass lost to truncation exceeds the configured tolerance."""

    exit_code = 4

    def __init__(self, message, stage=None, lost=None):
        super().__init__(message)
        self.stage = stage
        self.lost = lost


class DivergenceError(DisperseError, ArithmeticError):
    exit_code = 5


class UsageError(DisperseError, ValueError):
    """Wrong table variant or observation convention handed to an operation."""

    exit_code = 2


class KernelDomainError(DisperseError, ValueError):
    exit_code = 4
