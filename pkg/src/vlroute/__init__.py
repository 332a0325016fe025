"""Parameter-free routing of a visual feature through LoRA/Adapter bottlenecks, at toy scale."""

__version__ = "0.1.0"

from ._kernels import BACKEND
from .errors import (
    CheckpointError,
    ConfigurationError,
    DimensionError,
    InvariantError,
    NonFiniteLossError,
    PreconditionError,
    RankError,
    ScheduleError,
    TaskError,
    VLRouteError,
)
from .models import ModelConfig, build_model
from .peft import PeftConfig, count_params, inject
from .routing import RoutingKind
from .tensor import Graph, Tensor, no_grad

__all__ = [
    "BACKEND",
    "CheckpointError",
    "ConfigurationError",
    "DimensionError",
    "Graph",
    "InvariantError",
    "ModelConfig",
    "NonFiniteLossError",
    "PeftConfig",
    "PreconditionError",
    "RankError",
    "RoutingKind",
    "ScheduleError",
    "TaskError",
    "Tensor",
    "VLRouteError",
    "__version__",
    "build_model",
    "count_params",
    "inject",
    "no_grad",
]
