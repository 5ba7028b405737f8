"""Exception types shared across the package.

The CLI maps these onto exit codes (see cli.py): configuration and input
problems exit 3, numeric failures exit 4, I/O failures exit 5.
"""


class CubesegError(Exception):
    """Base class for all package errors."""


class DimensionError(CubesegError):
    """Shapes or sizes violate an operation's preconditions."""


class FormatError(CubesegError):
    """A serialized file is malformed; message carries the byte offset."""


class ConsistencyError(CubesegError):
    """Structurally valid inputs that contradict each other."""


class NumericError(CubesegError):
    """Non-finite values where finite ones are required."""


class ConfigError(CubesegError):
    """Invalid configuration, including phantom specs that cannot be realized."""
