"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Inconsistent or invalid configuration (shape/capacity mismatch, bad plan)."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class NumericalError(RuntimeError):
    """Non-finite values or divergence encountered during a numerical pass."""

    def __init__(self, message: str, *, step: int | None = None, epoch: int | None = None):
        super().__init__(message)
        self.step = step
        self.epoch = epoch


class RenormalizationError(ValueError):
    """A row lost all attention mass and cannot be renormalized."""

    def __init__(self, message: str, *, row: int):
        super().__init__(message)
        self.row = row
