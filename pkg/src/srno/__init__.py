"""Arbitrary-scale super-resolution with a Galerkin-attention neural operator."""

from .errors import CheckpointError, ConfigError, NumericError, ShapeError
from .model import SRNO
from .operator import DESK_CONFIG, QuerySet, SrnoConfig

__all__ = ["SRNO", "SrnoConfig", "QuerySet", "DESK_CONFIG",
           "CheckpointError", "ConfigError", "NumericError", "ShapeError"]
__version__ = "0.1.0"
