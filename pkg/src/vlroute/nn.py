"""Toy transformer building blocks on top of :mod:`vlroute.tensor`.

Backbone weights are random-initialised and normally frozen. PEFT slots
(LoRA on attention query/value maps, Adapters after each sublayer) are
filled by :func:`vlroute.peft.inject`; blocks only hold references and call
them with the routing feature.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import (
    Tensor,
    add,
    concat,
    cross_entropy,
    embedding,
    gelu,
    layer_norm,
    linear,
    matmul,
    permute,
    relu,
    reshape,
    scale,
    softmax_rows,
    transpose,
)

__all__ = [
    "Module",
    "LinearMap",
    "LayerNorm",
    "Embedding",
    "MultiHeadAttention",
    "FeedForward",
    "TransformerBlock",
    "causal_mask",
    "cross_entropy",
]


def param(data, trainable: bool = True) -> Tensor:
    return Tensor(data, requires_grad=trainable)


class Module:
    """Attribute-walking parameter container.

    Public attributes that are tensors, modules, or dicts/lists of modules are
    enumerated in insertion order; names are dotted paths.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield from _walk(prefix + name, value)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{name}.")
            elif isinstance(value, dict):
                for k, v in value.items():
                    if isinstance(v, Module):
                        yield from v.named_modules(f"{prefix}{name}.{k}.")
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield from v.named_modules(f"{prefix}{name}.{i}.")

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(name: str, value) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(f"{name}.{k}", v)
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(f"{name}.{i}", v)


class LinearMap(Module):
    """``y = x W^T + b`` with ``W`` of shape (d_out, d_in)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None, *,
                 bias: bool = True, frozen: bool = False, std: float | None = None, zero: bool = False):
        self.d_in = d_in
        self.d_out = d_out
        if zero or rng is None:
            w = np.zeros((d_out, d_in))
        else:
            w = rng.normal(0.0, std if std is not None else 1.0 / math.sqrt(d_in), (d_out, d_in))
        self.weight = param(w, not frozen)
        self.bias = param(np.zeros(d_out), not frozen) if bias else None

    @property
    def frozen(self) -> bool:
        return not self.weight.requires_grad

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5, frozen: bool = False):
        self.eps = eps
        self.gamma = param(np.ones(d), not frozen)
        self.beta = param(np.zeros(d), not frozen)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    """Token table plus optional learned absolute positions."""

    def __init__(self, vocab: int, d: int, rng: np.random.Generator, *, max_len: int | None = None,
                 frozen: bool = False):
        self.table = param(rng.normal(0.0, 1.0 / math.sqrt(d), (vocab, d)), not frozen)
        self.positions = (
            param(rng.normal(0.0, 1.0 / math.sqrt(d), (max_len, d)), not frozen) if max_len else None
        )

    @property
    def vocab(self) -> int:
        return self.table.shape[0]

    def tokens(self, ids) -> Tensor:
        return embedding(self.table, ids)

    def add_positions(self, x: Tensor) -> Tensor:
        """Add positional rows to ``x`` of shape (B, L, d)."""
        if self.positions is None:
            return x
        B, L = x.shape[0], x.shape[1]
        if L > self.positions.shape[0]:
            raise DimensionError(f"sequence length {L} exceeds max_len {self.positions.shape[0]}")
        pos_ids = np.broadcast_to(np.arange(L), (B, L))
        return add(x, embedding(self.positions, pos_ids))

    def __call__(self, ids) -> Tensor:
        return self.add_positions(self.tokens(ids))


def causal_mask(L: int, L_kv: int | None = None) -> np.ndarray:
    """Boolean mask, True where key index exceeds query index."""
    L_kv = L if L_kv is None else L_kv
    return np.triu(np.ones((L, L_kv), dtype=bool), k=1)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``h`` heads of width ``d / h``.

    ``lora`` maps a site name (``"q"`` or ``"v"``) to an injected PEFT slot.
    """

    SITES = ("q", "k", "v", "o")

    def __init__(self, d: int, h: int, rng: np.random.Generator, *, causal: bool = False,
                 frozen: bool = False, zero_output: bool = False):
        if d % h:
            raise ConfigurationError(f"model width {d} is not divisible by head count {h}")
        self.d = d
        self.h = h
        self.causal = causal
        self.q = LinearMap(d, d, rng, frozen=frozen)
        self.k = LinearMap(d, d, rng, frozen=frozen)
        self.v = LinearMap(d, d, rng, frozen=frozen)
        self.o = LinearMap(d, d, rng, frozen=frozen, zero=zero_output)
        self.lora: dict = {}
        self._capture = False
        self._last_weights: np.ndarray | None = None

    def _project(self, site: str, x: Tensor, x_R, task) -> Tensor:
        base = getattr(self, site)
        slot = self.lora.get(site)
        if slot is None:
            return base(x)
        return slot.forward_lora(base, x, x_R, task)

    def _split(self, t: Tensor) -> Tensor:
        B, L, _ = t.shape
        return permute(reshape(t, (B, L, self.h, self.d // self.h)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, x_R: Tensor | None = None, task: str | None = None,
                 memory: Tensor | None = None) -> Tensor:
        B, L, d = x.shape
        if d != self.d:
            raise DimensionError(f"attention width {self.d} does not match input {x.shape}")
        src = x if memory is None else memory
        q = self._split(self._project("q", x, x_R, task))
        k = self._split(self._project("k", src, x_R, task) if memory is None else self.k(src))
        v = self._split(self._project("v", src, x_R, task) if memory is None else self.v(src))
        scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d // self.h))
        mask = causal_mask(L, src.shape[1]) if self.causal else None
        weights = softmax_rows(scores, mask)
        if self._capture:
            self._last_weights = weights.data.copy()
        out = permute(matmul(weights, v), (0, 2, 1, 3))
        return self.o(reshape(out, (B, L, d)))


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator, *, frozen: bool = False,
                 zero_output: bool = False, activation: str = "gelu"):
        self.fc1 = LinearMap(d, hidden, rng, frozen=frozen)
        self.fc2 = LinearMap(hidden, d, rng, frozen=frozen, zero=zero_output)
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        hdn = self.fc1(x)
        hdn = gelu(hdn) if self.activation == "gelu" else relu(hdn)
        return self.fc2(hdn)


class TransformerBlock(Module):
    """Pre-norm block: ``x + MHA(LN(x))`` then ``x + FFN(LN(x))``.

    Adapter slots sit after each sublayer's residual add. With ``cross=True``
    a cross-attention sublayer over ``memory`` is placed between the two.
    """

    def __init__(self, d: int, h: int, rng: np.random.Generator, *, causal: bool = False,
                 cross: bool = False, ffn_mult: int = 4, frozen: bool = False, zero_outputs: bool = False):
        self.d = d
        self.ln1 = LayerNorm(d, frozen=frozen)
        self.attn = MultiHeadAttention(d, h, rng, causal=causal, frozen=frozen, zero_output=zero_outputs)
        if cross:
            self.ln_cross = LayerNorm(d, frozen=frozen)
            self.cross_attn = MultiHeadAttention(d, h, rng, frozen=frozen, zero_output=zero_outputs)
        else:
            self.ln_cross = None
            self.cross_attn = None
        self.ln2 = LayerNorm(d, frozen=frozen)
        self.ffn = FeedForward(d, ffn_mult * d, rng, frozen=frozen, zero_output=zero_outputs)
        self.adapter_attn = None
        self.adapter_ffn = None

    @property
    def causal(self) -> bool:
        return self.attn.causal

    def __call__(self, x: Tensor, x_R: Tensor | None = None, task: str | None = None,
                 memory: Tensor | None = None) -> Tensor:
        x = add(x, self.attn(self.ln1(x), x_R, task))
        if self.adapter_attn is not None:
            x = self.adapter_attn.forward_adapter(x, x_R, task)
        if self.cross_attn is not None:
            if memory is None:
                raise ConfigurationError("decoder block with cross-attention needs encoder memory")
            x = add(x, self.cross_attn(self.ln_cross(x), memory=memory))
        x = add(x, self.ffn(self.ln2(x)))
        if self.adapter_ffn is not None:
            x = self.adapter_ffn.forward_adapter(x, x_R, task)
        return x


def prepend(first: Tensor, rest: Tensor) -> Tensor:
    """Concatenate along the sequence axis: (B, 1, d) + (B, L, d) -> (B, L+1, d)."""
    return concat([first, rest], axis=1)
