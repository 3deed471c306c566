"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes do not conform for the requested operation."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration value."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class UndefinedResultError(ValueError):
    """A loss or metric has no defined value (e.g. empty validity mask)."""


class CheckpointError(RuntimeError):
    """Checkpoint file is damaged or does not match the model."""


class FormatError(RuntimeError):
    """Dataset file is malformed; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
