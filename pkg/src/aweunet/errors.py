"""Exception hierarchy shared by the library and the command line."""


class AWEUNetError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(AWEUNetError, ValueError):
    """An operation was called with arguments outside its contract."""


class ConfigError(ContractViolation):
    """A configuration value is invalid."""


class DegenerateInputError(ContractViolation):
    """The input carries no usable information (e.g. a constant image)."""


class TrainingDiverged(AWEUNetError, RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, epoch: int, batch_index: int, loss: float):
        self.epoch = epoch
        self.batch_index = batch_index
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, batch index {batch_index}"
        )
