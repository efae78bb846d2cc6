"""Exception taxonomy shared across the package.

Every failure mode maps onto one of these classes so callers (and the CLI
exit-code logic) can tell user mistakes apart from runtime breakdowns.
"""


class NowquantError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(NowquantError, ValueError):
    """Tensor shapes or kernel geometry violate an operation's contract."""


class ContractError(NowquantError, ValueError):
    """An API precondition was violated (bad argument, empty batch, ...)."""


class ConfigError(NowquantError, ValueError):
    """A configuration value is missing, unknown, or out of range."""


class DataError(NowquantError, ValueError):
    """A dataset is unusable: empty split, all-zero normalization, ..."""


class FormatError(NowquantError, ValueError):
    """A binary file does not conform to its declared layout."""


class NumericError(NowquantError, ArithmeticError):
    """A computation produced NaN or infinity from finite inputs."""


class TrainingError(NowquantError, RuntimeError):
    """Training diverged or hit a non-finite gradient."""

    def __init__(self, message, run_log=None):
        super().__init__(message)
        self.run_log = run_log
