"""Exception hierarchy shared across the package.

Each class maps to a CLI exit code so command wrappers can translate
failures uniformly.
"""


class ProsError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(ProsError):
    """Invalid configuration value or malformed config file."""

    exit_code = 2


class PreconditionError(ProsError):
    """A call violated an operation precondition (bad shapes, missing inputs)."""

    exit_code = 3


class NumericError(ProsError):
    """Non-finite values encountered during computation."""

    exit_code = 4
