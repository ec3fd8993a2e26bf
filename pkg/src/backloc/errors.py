"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: config errors exit 2, data
errors exit 3, numerical errors exit 4.
"""


class BacklocError(Exception):
    exit_code = 1


class ConfigError(BacklocError):
    """Invalid configuration value, unknown flag, bad precedence input."""

    exit_code = 2


class DataError(BacklocError):
    """Broken or inconsistent input data (files, shards, pairings)."""

    exit_code = 3


class FormatError(DataError):
    """Malformed binary file; carries the byte offset of the failure."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DegenerateSeedError(DataError):
    """The mined background seed has a zero-norm feature vector."""


class NumericalError(BacklocError):
    exit_code = 4


class CgDivergenceError(NumericalError):
    """Iterative solve diverged; carries the final relative residual."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (final relative residual {residual:.3e})")
        self.residual = residual


class SingularSystemError(NumericalError):
    """The assembled linear system has no unique solution."""
