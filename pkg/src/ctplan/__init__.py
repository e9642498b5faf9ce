"""Consistency trajectory planning in plain numpy."""

from .errors import ContractError, DimensionError, MissingArtifact, NumericError, TrainingDivergence

__version__ = "0.1.0"

__all__ = ["ContractError", "DimensionError", "MissingArtifact", "NumericError", "TrainingDivergence",
           "__version__"]
