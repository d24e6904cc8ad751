"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not fit together."""


class DomainError(ValueError):
    """An argument lies outside the domain where the operation is defined."""


class UsageError(RuntimeError):
    """An API was called in a state or mode that does not support it."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite value."""


class FormatError(ValueError):
    """A data file does not follow its declared format."""


class TrainingDiverged(NumericalError):
    def __init__(self, step: int, last_finite_loss: float | None):
        self.step = step
        self.last_finite_loss = last_finite_loss
        super().__init__(
            f"loss became non-finite at step {step} (last finite loss: {last_finite_loss})"
        )
