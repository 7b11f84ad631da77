"""Exception hierarchy shared across the library.

Every error raised on a user-facing path derives from ContextNetError so the
CLI can map failures to a single-line message and a nonzero exit code.
"""


class ContextNetError(Exception):
    """Base class for all library errors."""


class ShapeError(ContextNetError, ValueError):
    """A tensor had the wrong rank, size or channel count for an operation."""


class GraphError(ContextNetError, ValueError):
    """A graph definition is malformed or a node failed during execution."""


class ConfigError(ContextNetError, ValueError):
    """A configuration value or key is invalid."""


class CheckpointError(ContextNetError, ValueError):
    """A checkpoint file is missing, corrupt or inconsistent with the graph."""


class DataError(ContextNetError, ValueError):
    """A dataset file or directory is malformed."""


class NumericsError(ContextNetError, ArithmeticError):
    """Training produced a non-finite value."""
