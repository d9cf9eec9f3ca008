"""Exception types shared across the package."""


class EtageError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(EtageError, ValueError):
    """Operand shapes do not conform."""


class ParameterError(EtageError, ValueError):
    """A configuration or function parameter is out of its valid range."""


class ContractError(EtageError, ValueError):
    """A precondition on the input values is violated."""


class NonFiniteError(EtageError, FloatingPointError):
    """A NaN or Inf would have entered a tensor."""


class TrainingDivergenceError(EtageError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"pretraining diverged at epoch {epoch} (loss={loss!r})")
        self.epoch = epoch
        self.loss = loss


class AdaptationDivergenceError(EtageError):
    def __init__(self, batch_index: int, selected: list[int], loss: float):
        super().__init__(
            f"adaptation loss not finite at batch {batch_index} (loss={loss!r}, selected={selected})"
        )
        self.batch_index = batch_index
        self.selected = list(selected)
        self.loss = loss


class UndefinedMetricError(EtageError, ValueError):
    """The metric has no value for the given records (empty set, single outcome class)."""


class ConfigError(EtageError, ValueError):
    """Invalid experiment configuration (unknown key, bad value)."""


class SchemaVersionError(EtageError, ValueError):
    """A persisted file carries a schema version this code cannot read."""
