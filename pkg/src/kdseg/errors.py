"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration / contract / ingestion /
checkpoint problems are user-facing validation failures (exit 3), everything
else is a runtime failure (exit 1).
"""


class KDSegError(Exception):
    """Base class for all package errors."""


class ContractError(KDSegError):
    """An argument violates an operation's contract (shape, domain, range)."""


class ConfigError(KDSegError):
    """A configuration value is invalid or inconsistent."""


class IngestionError(KDSegError):
    """A subject directory or volume file could not be read or is malformed."""


class CheckpointError(KDSegError):
    """A checkpoint is missing, unreadable, or incompatible with its slot."""


class TrainingError(KDSegError):
    """Training aborted (e.g. the loss became non-finite)."""
