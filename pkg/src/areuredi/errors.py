"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: DomainError / ResourceError /
NumericalError exit 1, ConfigError exit 2.
"""


class AreuredError(Exception):
    """Base class for all package errors."""


class DomainError(AreuredError, ValueError):
    """An argument violates an operation's precondition."""


class ResourceError(AreuredError, RuntimeError):
    """An exact computation was requested on a space above the enumeration cap."""


class NumericalError(AreuredError, ArithmeticError):
    """A quantity that must be positive/finite degenerated at runtime."""


class ConfigError(AreuredError, ValueError):
    """A config document or CLI flag set failed validation.

    The message names the offending key path.
    """
