"""LoRA and Adapter units with optional routing in the bottleneck.

A :class:`PeftUnit` owns ``w_down`` (r x d) and ``w_up`` (d x r) plus, when
configured, biases (Adapter), a separate routing down-map ``w_down_r``, the
``w_mid`` map of the ``d -> r/4 -> r -> d`` chain, or the query/key/value
maps of the cross-attention comparator. Routing itself adds no parameters.

Units are attached to a model through :class:`PeftSlot` objects, which hold
either one shared unit or one unit per task.
"""

from __future__ import annotations

import enum
import math
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, TaskError
from .nn import LinearMap, Module, param
from .routing import MULTIROW_KINDS, RoutingKind, dispatch, prepare_xv
from .tensor import Tensor, add, gelu, linear, matmul, relu, scale, softmax_rows, transpose

SHARED = "*"


class PeftKind(str, enum.Enum):
    LORA = "lora"
    ADAPTER = "adapter"

    @classmethod
    def parse(cls, value) -> "PeftKind":
        try:
            return cls(value)
        except ValueError:
            raise ConfigurationError(f"unknown PEFT kind {value!r}; valid strings are 'lora', 'adapter'") from None


class Chain(str, enum.Enum):
    STANDARD = "standard"
    QUARTER = "quarter"

    @classmethod
    def parse(cls, value) -> "Chain":
        try:
            return cls(value)
        except ValueError:
            raise ConfigurationError(f"unknown chain {value!r}; valid strings are 'standard', 'quarter'") from None


class XRSource(str, enum.Enum):
    VISUAL_CLS = "visual_cls"
    PROJECTED_VISUAL = "projected_visual"
    POOLED_ENCODER_STATE = "pooled_encoder_state"
    ONES = "ones"
    RANDOM_NOISE = "random_noise"


@dataclass
class RoutingFeature:
    """Raw routing feature ``(B, L_v, d)`` and where it came from."""

    raw: Tensor
    source: XRSource


def _raw(x_R) -> Tensor | None:
    return x_R.raw if isinstance(x_R, RoutingFeature) else x_R


class PeftUnit(Module):
    """One low-rank bottleneck."""

    def __init__(self, kind, d_in: int, d_out: int, r: int, rng: np.random.Generator, *,
                 alpha: float | None = None, routing="none", share_down: bool = True,
                 chain="standard", nonlinearity: str = "relu", bias: bool | None = None,
                 pool: bool = True, d_route: int | None = None):
        self.kind = PeftKind.parse(kind)
        self.routing = RoutingKind.parse(routing)
        self.chain = Chain.parse(chain)
        if r < 1:
            raise ConfigurationError(f"rank must be positive, got {r}")
        if r >= min(d_in, d_out):
            raise ConfigurationError(f"rank {r} must be below the mapped width ({d_in}->{d_out})")
        if self.kind is PeftKind.ADAPTER and d_in != d_out:
            raise ConfigurationError("adapters are residual and need d_in == d_out")
        if self.chain is Chain.QUARTER and r % 4:
            raise ConfigurationError(f"quarter chain needs r divisible by 4, got r={r}")
        if nonlinearity not in ("relu", "gelu"):
            raise ConfigurationError(f"adapter nonlinearity must be 'relu' or 'gelu', got {nonlinearity!r}")
        if not pool and self.routing not in MULTIROW_KINDS and self.routing is not RoutingKind.CROSS_ATTN:
            raise ConfigurationError(f"routing {self.routing.value!r} needs pooled routing features")

        self.r = r
        self.d_in = d_in
        self.d_out = d_out
        self.alpha = float(r if alpha is None else alpha)
        self.share_down = True if self.routing is RoutingKind.CROSS_ATTN else bool(share_down)
        self.nonlinearity = nonlinearity
        self.pool = pool
        d_route = d_in if d_route is None else d_route
        inner = r // 4 if self.chain is Chain.QUARTER else r
        self.inner = inner
        has_bias = (self.kind is PeftKind.ADAPTER) if bias is None else bool(bias)
        self.has_bias = has_bias

        if self.kind is PeftKind.LORA:
            down_std = 1.0 / math.sqrt(d_in)
            route_std = 1.0 / math.sqrt(d_route)
        else:
            down_std = route_std = 1e-2

        if self.routing is RoutingKind.CROSS_ATTN:
            self.w_q = param(rng.normal(0.0, down_std, (inner, d_in)))
            self.w_k = param(rng.normal(0.0, route_std, (inner, d_route)))
            self.w_v = param(rng.normal(0.0, route_std, (inner, d_route)))
        else:
            self.w_down = param(rng.normal(0.0, down_std, (inner, d_in)))
            self.b_down = param(np.zeros(inner)) if has_bias else None
            if self.routing is not RoutingKind.NONE and not self.share_down:
                self.w_down_r = param(rng.normal(0.0, route_std, (inner, d_route)))
        if self.chain is Chain.QUARTER:
            self.w_mid = param(rng.normal(0.0, 1.0 / math.sqrt(inner), (r, inner)))
        self.w_up = param(np.zeros((d_out, r)))
        self.b_up = param(np.zeros(d_out)) if has_bias else None

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def _down_route(self) -> Tensor:
        w = getattr(self, "w_down_r", None)
        return self.w_down if w is None else w

    def _cross_attend(self, x_H: Tensor, x_R: Tensor) -> Tensor:
        q = linear(x_H, self.w_q)
        k = linear(x_R, self.w_k)
        v = linear(x_R, self.w_v)
        w = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(self.inner)))
        return matmul(w, v)

    def bottleneck(self, x_H: Tensor, x_R=None) -> Tensor:
        """Everything between the input and ``w_mid``/``w_up`` (nonlinearity excluded)."""
        x_R = _raw(x_R)
        if self.routing is not RoutingKind.NONE and x_R is None:
            raise ConfigurationError(f"routing {self.routing.value!r} is on but no routing feature was given")
        if self.routing is RoutingKind.CROSS_ATTN:
            return self._cross_attend(x_H, x_R)
        x_t = linear(x_H, self.w_down, self.b_down)
        if self.routing is RoutingKind.NONE:
            return x_t
        x_v = linear(x_R, self._down_route())
        if self.pool:
            x_v = prepare_xv(x_v)
        return dispatch(self.routing, x_t, x_v)

    def _up(self, z: Tensor) -> Tensor:
        if self.chain is Chain.QUARTER:
            z = linear(z, self.w_mid)
        return linear(z, self.w_up, self.b_up)

    def lora_delta(self, x_H: Tensor, x_R=None) -> Tensor:
        return scale(self._up(self.bottleneck(x_H, x_R)), self.scaling)

    def lora_forward(self, base: LinearMap, x_H: Tensor, x_R=None) -> Tensor:
        if self.kind is not PeftKind.LORA:
            raise ConfigurationError("lora_forward on an adapter unit")
        return add(base(x_H), self.lora_delta(x_H, x_R))

    def adapter_forward(self, x: Tensor, x_R=None) -> Tensor:
        if self.kind is not PeftKind.ADAPTER:
            raise ConfigurationError("adapter_forward on a LoRA unit")
        z = self.bottleneck(x, x_R)
        if self.routing is not RoutingKind.CROSS_ATTN:
            z = relu(z) if self.nonlinearity == "relu" else gelu(z)
        return add(x, self._up(z))


class PeftSlot(Module):
    """Injection site holding one shared unit or one unit per task."""

    def __init__(self, units: Mapping[str, PeftUnit]):
        self.units = dict(units)

    @property
    def shared(self) -> bool:
        return list(self.units) == [SHARED]

    def unit_for(self, task: str | None) -> PeftUnit:
        if self.shared:
            return self.units[SHARED]
        if task not in self.units:
            raise TaskError(f"no PEFT unit for task {task!r}; known tasks are {sorted(self.units)}")
        return self.units[task]

    def forward_lora(self, base, x, x_R, task):
        return self.unit_for(task).lora_forward(base, x, x_R)

    def forward_adapter(self, x, x_R, task):
        return self.unit_for(task).adapter_forward(x, x_R)


@dataclass
class PeftConfig:
    """Where and how to inject PEFT units.

    ``routing`` is a single kind or, with ``tasks`` set (multi-unit mode), a
    mapping task -> kind. ``stacks`` limits which block stacks receive units
    and ``route_stacks`` which of those see the routing feature; ``None``
    means every stack (encoder-decoder models default to decoder-only
    routing, see :meth:`resolved_route_stacks`).
    """

    kind: str = "lora"
    r: int = 4
    alpha: float | None = None
    routing: "str | Mapping[str, str]" = "none"
    share_down: bool = True
    chain: str = "standard"
    nonlinearity: str = "relu"
    bias: bool | None = None
    pool: bool = True
    sites: Sequence[str] = ("q", "v")
    blocks: Sequence[int] | None = None
    stacks: Sequence[str] | None = None
    route_stacks: Sequence[str] | None = None
    tasks: Sequence[str] | None = None
    seed: int = 0

    def routing_for(self, task: str) -> RoutingKind:
        if isinstance(self.routing, Mapping):
            if task not in self.routing:
                raise ConfigurationError(f"per-task routing has no entry for task {task!r}")
            return RoutingKind.parse(self.routing[task])
        return RoutingKind.parse(self.routing)

    def is_routed(self) -> bool:
        if isinstance(self.routing, Mapping):
            return any(RoutingKind.parse(v) is not RoutingKind.NONE for v in self.routing.values())
        return RoutingKind.parse(self.routing) is not RoutingKind.NONE


def _unit_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def inject(model, cfg: PeftConfig):
    """Freeze the backbone and attach PEFT units in place; returns ``model``."""
    kind = PeftKind.parse(cfg.kind)
    if isinstance(cfg.routing, Mapping) and not cfg.tasks:
        raise ConfigurationError("a per-task routing map needs multi-unit mode (set tasks)")
    stacks = model.stacks()
    targets = list(stacks) if cfg.stacks is None else list(cfg.stacks)
    route_stacks = model.default_route_stacks() if cfg.route_stacks is None else list(cfg.route_stacks)
    for s in list(targets) + list(route_stacks):
        if s not in stacks:
            raise ConfigurationError(f"unknown block stack {s!r}; model has {sorted(stacks)}")
    for site in cfg.sites:
        if site not in ("q", "k", "v", "o"):
            raise ConfigurationError(f"unknown LoRA site {site!r}; expected one of q, k, v, o")

    model.freeze_backbone()
    for stack in targets:
        blocks = stacks[stack]
        indices = range(len(blocks)) if cfg.blocks is None else cfg.blocks
        routed = stack in route_stacks
        for i in indices:
            if not 0 <= i < len(blocks):
                raise ConfigurationError(f"block index {i} out of range for stack {stack!r} ({len(blocks)} blocks)")
            blk = blocks[i]
            if kind is PeftKind.LORA:
                for site in cfg.sites:
                    name = f"{stack}.{i}.attn.{site}"
                    if site in blk.attn.lora:
                        raise ConfigurationError(f"site {name} already holds a PEFT unit")
                    base = getattr(blk.attn, site)
                    blk.attn.lora[site] = _make_slot(cfg, kind, name, base.d_in, base.d_out, routed, model.route_dim)
            else:
                for attr in ("adapter_attn", "adapter_ffn"):
                    name = f"{stack}.{i}.{attr}"
                    if getattr(blk, attr) is not None:
                        raise ConfigurationError(f"site {name} already holds a PEFT unit")
                    setattr(blk, attr, _make_slot(cfg, kind, name, blk.d, blk.d, routed, model.route_dim))
    model.peft_config = cfg
    return model


def _make_slot(cfg: PeftConfig, kind: PeftKind, name: str, d_in: int, d_out: int, routed: bool,
               d_route: int) -> PeftSlot:
    def unit(task_key: str, routing: RoutingKind) -> PeftUnit:
        return PeftUnit(
            kind, d_in, d_out, cfg.r, _unit_rng(cfg.seed, f"{name}/{task_key}"),
            alpha=cfg.alpha, routing=routing if routed else RoutingKind.NONE,
            share_down=cfg.share_down, chain=cfg.chain, nonlinearity=cfg.nonlinearity,
            bias=cfg.bias, pool=cfg.pool, d_route=d_route,
        )

    if cfg.tasks:
        return PeftSlot({t: unit(t, cfg.routing_for(t)) for t in cfg.tasks})
    return PeftSlot({SHARED: unit(SHARED, cfg.routing_for(SHARED))})


@dataclass
class ParamBudget:
    trainable: int
    frozen: int
    per_unit: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.trainable + self.frozen


def peft_units(model: Module) -> list[tuple[str, PeftUnit]]:
    return [(n, m) for n, m in model.named_modules() if isinstance(m, PeftUnit)]


def count_params(model: Module) -> ParamBudget:
    trainable = frozen = 0
    for _, p in model.named_parameters():
        if p.requires_grad:
            trainable += p.size
        else:
            frozen += p.size
    per_unit = {n: u.num_parameters() for n, u in peft_units(model)}
    return ParamBudget(trainable, frozen, per_unit)


def analytic_unit_count(kind, d: int, r: int, *, routing="none", share_down: bool = True,
                        chain="standard", bias: bool | None = None, d_out: int | None = None,
                        d_route: int | None = None) -> int:
    """Closed-form parameter count of one unit; mirrors :class:`PeftUnit` allocation."""
    kind = PeftKind.parse(kind)
    routing = RoutingKind.parse(routing)
    chain = Chain.parse(chain)
    d_out = d if d_out is None else d_out
    d_route = d if d_route is None else d_route
    inner = r // 4 if chain is Chain.QUARTER else r
    has_bias = (kind is PeftKind.ADAPTER) if bias is None else bias
    if routing is RoutingKind.CROSS_ATTN:
        n = inner * d + 2 * inner * d_route
    else:
        n = inner * d + (inner if has_bias else 0)
        if routing is not RoutingKind.NONE and not share_down:
            n += inner * d_route
    if chain is Chain.QUARTER:
        n += r * inner
    n += d_out * r + (d_out if has_bias else 0)
    return n
