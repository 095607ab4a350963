"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array or coefficient sizes disagree with what an operation expects."""


class NumericalError(RuntimeError):
    """An optimization or solve produced a non-finite or unusable result."""


class RecoveryError(NumericalError):
    """Lighting or albedo least squares could not be solved."""

    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition
