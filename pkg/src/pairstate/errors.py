"""Shared exception types, mapped to CLI exit codes in cli.py."""


class ConfigError(ValueError):
    """Invalid configuration or usage (exit code 2)."""


class DataError(RuntimeError):
    """I/O failure or malformed data file (exit code 3)."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss during optimization (exit code 4)."""

    def __init__(self, epoch, batch, value):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
