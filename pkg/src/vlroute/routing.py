"""Parameter-free routing functions applied inside a low-rank bottleneck.

All functions take ``x_t`` (the down-projected hidden states, ``(..., L_t, r)``)
and ``x_v`` (the down-projected routing feature, ``(..., 1, r)`` once pooled)
and return a tensor shaped like ``x_t``. None of them owns state.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .errors import ConfigurationError, DimensionError, PreconditionError
from .tensor import (
    Tensor,
    add,
    broadcast_rows,
    matmul,
    mean_rows,
    mul,
    relu,
    transpose,
)


class RoutingKind(str, enum.Enum):
    NONE = "none"
    ELTWISE_MUL = "mul"
    ELTWISE_ADD = "add"
    PROJ_MUL = "proj"
    RESCALE_MUL = "rescale"
    RELU_PROJ_MUL = "relu_proj"
    CROSS_ATTN = "cross_attn"

    @classmethod
    def parse(cls, value: "str | RoutingKind") -> "RoutingKind":
        if isinstance(value, RoutingKind):
            return value
        for kind in cls:
            if kind.value == value:
                return kind
        valid = ", ".join(repr(k.value) for k in cls)
        raise ConfigurationError(f"unknown routing kind {value!r}; valid strings are {valid}")


#: The four linear routing functions.
LINEAR_KINDS = (
    RoutingKind.ELTWISE_MUL,
    RoutingKind.ELTWISE_ADD,
    RoutingKind.PROJ_MUL,
    RoutingKind.RESCALE_MUL,
)

#: Kinds that are well defined for an unpooled multi-row ``x_v``.
MULTIROW_KINDS = (RoutingKind.NONE, RoutingKind.PROJ_MUL, RoutingKind.RELU_PROJ_MUL)


@dataclass(frozen=True)
class BottleneckPair:
    """Validated ``(x_t, x_v)`` pair. ``x_v`` must hold a single row unless ``multirow``."""

    x_t: Tensor
    x_v: Tensor
    multirow: bool = False

    def __post_init__(self):
        check_pair(self.x_t, self.x_v, self.multirow)


def check_pair(x_t: Tensor, x_v: Tensor, multirow: bool = False) -> None:
    if x_t.ndim < 2 or x_v.ndim != x_t.ndim:
        raise DimensionError(f"bottleneck pair needs matching matrix ranks, got {x_t.shape} and {x_v.shape}")
    if x_t.shape[-1] != x_v.shape[-1]:
        raise DimensionError(f"x_t and x_v disagree on rank extent: {x_t.shape} vs {x_v.shape}")
    if x_t.shape[:-2] != x_v.shape[:-2]:
        raise DimensionError(f"x_t and x_v disagree on batch axes: {x_t.shape} vs {x_v.shape}")
    if not multirow and x_v.shape[-2] != 1:
        raise PreconditionError(f"x_v must have exactly one row, got {x_v.shape[-2]}; pool it first")


def prepare_xv(features: Tensor) -> Tensor:
    """Average-pool routing features over rows; a single row passes through."""
    if features.ndim < 2:
        raise PreconditionError(f"routing features need a row axis, got shape {features.shape}")
    if features.shape[-2] == 1:
        return features
    return mean_rows(features)


def route_eltwise_mul(x_t: Tensor, x_v: Tensor) -> Tensor:
    check_pair(x_t, x_v)
    return mul(x_t, broadcast_rows(x_v, x_t.shape[-2]))


def route_eltwise_add(x_t: Tensor, x_v: Tensor) -> Tensor:
    check_pair(x_t, x_v)
    return add(x_t, broadcast_rows(x_v, x_t.shape[-2]))


def route_proj_mul(x_t: Tensor, x_v: Tensor) -> Tensor:
    """``x_t @ x_v.T @ x_v``; for a multi-row ``x_v`` this is the plain matrix product."""
    check_pair(x_t, x_v, multirow=True)
    return matmul(matmul(x_t, transpose(x_v)), x_v)


def route_rescale_mul(x_t: Tensor, x_v: Tensor) -> Tensor:
    """``x_t @ X`` where ``X`` is ``x_v`` replicated into an ``r x r`` matrix.

    Row ``i`` of the result is ``sum(x_t[i]) * x_v``.
    """
    check_pair(x_t, x_v)
    return matmul(x_t, broadcast_rows(x_v, x_v.shape[-1]))


def route_relu_proj(x_t: Tensor, x_v: Tensor) -> Tensor:
    # the trailing x_v factor stays unrectified
    check_pair(x_t, x_v, multirow=True)
    return matmul(matmul(relu(x_t), transpose(relu(x_v))), x_v)


_ROUTES = {
    RoutingKind.ELTWISE_MUL: route_eltwise_mul,
    RoutingKind.ELTWISE_ADD: route_eltwise_add,
    RoutingKind.PROJ_MUL: route_proj_mul,
    RoutingKind.RESCALE_MUL: route_rescale_mul,
    RoutingKind.RELU_PROJ_MUL: route_relu_proj,
}


def dispatch(kind: "RoutingKind | str", x_t: Tensor, x_v: Tensor) -> Tensor:
    kind = RoutingKind.parse(kind)
    if kind is RoutingKind.NONE:
        return x_t
    if kind is RoutingKind.CROSS_ATTN:
        raise ConfigurationError("cross_attn is not a routing function; configure it on the PEFT unit")
    return _ROUTES[kind](x_t, x_v)
