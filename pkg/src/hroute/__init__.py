"""Routed layer models: blocks exchange hidden states through learned connection weights over T iterations."""

from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DivergenceError,
    HRouteError,
    NumericError,
    ShapeError,
    TraceFormatError,
)
from .hmodel import HModel, HModelConfig, chain_plan, force_routing, forward
from .tensor import Tensor, no_grad

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DivergenceError",
    "HModel",
    "HModelConfig",
    "HRouteError",
    "NumericError",
    "ShapeError",
    "Tensor",
    "TraceFormatError",
    "chain_plan",
    "force_routing",
    "forward",
    "no_grad",
]
