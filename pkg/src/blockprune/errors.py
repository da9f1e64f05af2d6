"""Shared exception types."""


class SpecError(ValueError):
    """A network/block specification violates its structural invariants."""


class ContractViolation(RuntimeError):
    """An operation was called outside its declared preconditions."""


class ConfigError(ValueError):
    """A configuration value is invalid or unknown."""


class DataError(ValueError):
    """A dataset file could not be parsed.

    `offset` is the byte offset of the first bad record, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class CheckpointError(ValueError):
    """A checkpoint file is corrupt or has an unsupported version."""


class PruningExhausted(RuntimeError):
    """No prunable block remains; the pruning loop must stop early."""
