"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError):
    """Tensor shapes are incompatible."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finite data is required."""


class TrainingDivergence(NumericError):
    """Training produced NaN/Inf losses or gradients."""

    def __init__(self, message: str, step: int | None = None, param: str | None = None,
                 trace: list | None = None):
        super().__init__(message)
        self.step = step
        self.param = param
        self.trace = trace or []


class MissingArtifact(FileNotFoundError):
    """A required run artifact (dataset, checkpoint) does not exist."""
