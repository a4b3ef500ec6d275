"""Exception hierarchy shared across the package.

Core numerical operations raise plain ValueError for contract violations;
the classes here cover user-facing failures that the CLI maps to distinct
exit codes.
"""


class TrigaitError(Exception):
    """Base class for user-facing errors."""


class ConfigError(TrigaitError):
    """Malformed or invalid configuration (CLI exit code 2)."""


class DataError(TrigaitError):
    """Dataset layout, manifest, or file content problems (CLI exit code 3)."""


class CheckpointError(TrigaitError):
    """Unreadable or incompatible checkpoint (CLI exit code 4)."""
