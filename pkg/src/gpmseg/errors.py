"""Error types that map onto the CLI exit-code contract."""


class ConfigError(Exception):
    """Bad configuration key or value (CLI exit code 2)."""


class DataError(Exception):
    """Missing or malformed dataset file (CLI exit code 3)."""


class CheckpointError(Exception):
    """Unreadable or version-mismatched checkpoint (CLI exit code 4)."""


class UnsupportedLayerError(Exception):
    """A layer type the complexity counter has no formula for."""


class TrainingDiverged(Exception):
    """Loss became non-finite; carries the location for diagnostics."""

    def __init__(self, epoch: int, lr: float, batch_index: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index} (lr={lr:g})")
        self.epoch = epoch
        self.lr = lr
        self.batch_index = batch_index
