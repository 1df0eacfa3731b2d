"""Exception types shared across the package."""


class NetworkConfigError(ValueError):
    """A layer manifest, parameter set, or input does not compose."""


class TapeUsageError(RuntimeError):
    """A tape operation was invoked in an invalid state (e.g. no scalar head)."""


class IdxFormatError(ValueError):
    """An IDX file failed to parse; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class CacheFormatError(ValueError):
    """An adversarial-cache file is malformed or truncated."""


class CheckpointFormatError(ValueError):
    """A checkpoint file is malformed, truncated, or does not match its spec."""


class TrainingDivergedError(RuntimeError):
    """Training loss became non-finite; carries the epoch/batch it happened in."""

    def __init__(self, epoch: int, batch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class RunConfigError(ValueError):
    """A run configuration file is missing, malformed, or contains bad keys."""
