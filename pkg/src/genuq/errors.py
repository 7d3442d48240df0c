"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: config problems exit 2,
numeric failures exit 3, cache or hash mismatches exit 4.
"""


class GenUqError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(GenUqError):
    """Invalid, unknown, or inconsistent configuration input."""


class NumericError(GenUqError):
    """Non-finite values, divergence, or a numerically unusable matrix.

    ``index`` optionally carries the offending flat coordinate.
    """

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class HashMismatchError(GenUqError):
    """A persisted artifact does not match the hash it was produced under."""


class DimensionError(GenUqError):
    """Shape mismatch, annotated with the layer or field it occurred in."""

    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message)
        self.layer = layer


class StaleCacheError(GenUqError):
    """A backward pass was requested against activations from other weights."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_HASH = 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, HashMismatchError):
        return EXIT_HASH
    return 1
