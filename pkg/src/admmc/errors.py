"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code (see ``admmc.cli``).
"""


class AdmmcError(Exception):
    exit_code = 1


class ConfigError(AdmmcError):
    """Shapes, layer specs or run configuration are inconsistent."""

    exit_code = 2


class InputError(AdmmcError):
    """Bad user-supplied values (labels out of range, missing files, ...)."""

    exit_code = 3


class FormatError(AdmmcError):
    """A binary file (IDX, checkpoint, .admmc) is malformed."""

    exit_code = 5


class ConsistencyError(FormatError):
    """Two inputs that must agree do not (e.g. image/label counts)."""


class DegenerateInputError(AdmmcError):
    exit_code = 3


class ExactnessError(AdmmcError):
    """A surviving weight is not a member of its layer codebook."""

    exit_code = 6


class DivergenceError(AdmmcError):
    exit_code = 4

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
