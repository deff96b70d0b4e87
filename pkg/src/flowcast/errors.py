"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage/config problems exit 1,
data/format problems exit 2, numerical failures exit 3.
"""


class UsageError(ValueError):
    """An operation was invoked with arguments that cannot work (bad mode,
    missing history, backward on a non-scalar, ...)."""


class ConfigError(UsageError):
    """A configuration value is invalid or inconsistent."""


class ShapeError(UsageError):
    """Tensor extents do not line up for the requested operation."""


class GenerationError(ConfigError):
    """A scene spec cannot be realised (e.g. sprites would leave the frame)."""


class FormatError(ValueError):
    """A file on disk does not match its declared format."""


class DataError(FormatError):
    """A dataset directory is missing pieces or internally inconsistent."""


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss or gradient.

    Carries the iteration at which the failure was detected.
    """

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration
