"""Exception hierarchy shared by all modules.

Each class carries the CLI exit code of its failure class.
"""


class SuperatomError(Exception):
    exit_code = 1


class ConfigurationError(SuperatomError):
    """Bad or missing configuration data (schema, unknown keys, missing series)."""

    exit_code = 2


class DependencyError(SuperatomError):
    """A pipeline stage was asked to run before the stage it consumes."""

    exit_code = 3


class InfeasibleModelError(SuperatomError):
    exit_code = 4


class NumericalError(SuperatomError):
    """Non-Hermitian assembly, solver non-convergence, degenerate fits."""

    exit_code = 5
