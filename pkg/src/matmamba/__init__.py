"""Mamba2 blocks with a nested (Matryoshka) inner dimension, trained jointly on numpy."""
from .errors import (
    DimensionError, FormatError, IntegrityError, InvalidGranularityError, MatMambaError, NumericError, SchemaError,
    StateError,
)
from .models import GranularityConfig, ModelConfig, ModelParams, init_params, model_param_count, preset

__version__ = "0.1.0"

__all__ = [
    "DimensionError", "FormatError", "IntegrityError", "InvalidGranularityError", "MatMambaError", "NumericError",
    "SchemaError", "StateError", "GranularityConfig", "ModelConfig", "ModelParams", "init_params",
    "model_param_count", "preset",
]
