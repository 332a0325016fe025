"""Toy versions of the three host architectures.

* :class:`EncoderClassifier` - the visual vector is prepended as token 0 of a
  bidirectional encoder; a trainable two-layer MLP reads position 0.
* :class:`DecoderGenerator` - causal decoder with the visual vector prepended
  (or, in comparator mode, no visual token and the full per-attribute grid
  used as the routing / cross-attention feature).
* :class:`EncDecMultitask` - trainable visual projection into an encoder,
  task-prompt tokens, a causal decoder with cross-attention; decoder PEFT
  units see the mean-pooled last encoder state.

All backbones are random-initialised and frozen.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError
from .nn import Embedding, LayerNorm, LinearMap, Module, TransformerBlock, prepend
from .peft import RoutingFeature, XRSource, peft_units
from .tasks import Sample, Vocab
from .tensor import Tensor, cross_entropy, mean_rows, no_grad, relu, transpose, matmul

IGNORE = -100

ENCODER_CLASSIFIER = "encoder_classifier"
DECODER_GENERATOR = "decoder_generator"
ENCDEC_MULTITASK = "encdec_multitask"
MODEL_KINDS = (ENCODER_CLASSIFIER, DECODER_GENERATOR, ENCDEC_MULTITASK)


@dataclass
class ModelConfig:
    kind: str = ENCODER_CLASSIFIER
    d: int = 32
    heads: int = 2
    blocks: int = 2
    decoder_blocks: int = 2
    vocab: int = 64
    max_len: int = 16
    d_visual: int | None = None
    n_classes: int = 4
    head_hidden: int = 64
    ffn_mult: int = 4
    comparator: bool = False
    seed: int = 0

    @property
    def visual_dim(self) -> int:
        return self.d if self.d_visual is None else self.d_visual


@dataclass
class TaskBatch:
    """Collated arrays for one single-task batch."""

    task: str
    tokens: np.ndarray  # (B, L) textual input ids
    visual: np.ndarray  # (B, d_v)
    grid: np.ndarray  # (B, L_v, d_v)
    labels: np.ndarray  # (B,) classes or (B, T) targets with IGNORE padding
    decoder_in: np.ndarray | None = None  # (B, T)
    routing_feature: np.ndarray | None = None  # (B, d_v) ablation override
    xr_source: XRSource | None = None

    @property
    def size(self) -> int:
        return self.visual.shape[0]


def _pad(rows: Sequence[np.ndarray], value: int) -> np.ndarray:
    width = max((len(r) for r in rows), default=0)
    out = np.full((len(rows), width), value, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def collate(samples: Sequence[Sample], vocab: Vocab | None = None) -> TaskBatch:
    tasks = {s.task for s in samples}
    if len(tasks) != 1:
        raise ConfigurationError(f"a batch must hold a single task, got {sorted(tasks)}")
    bos = Vocab.BOS
    override = None
    if any(s.routing_feature is not None for s in samples):
        override = np.stack([s.routing_feature if s.routing_feature is not None else s.visual for s in samples])
    return TaskBatch(
        task=tasks.pop(),
        tokens=_pad([s.tokens for s in samples], Vocab.PAD),
        visual=np.stack([s.visual for s in samples]),
        grid=np.stack([s.grid for s in samples]),
        labels=np.array([s.label for s in samples], dtype=np.int64),
        decoder_in=_pad([np.concatenate([[bos], s.target[:-1]]) for s in samples], Vocab.PAD),
        routing_feature=override,
    )


def caption_labels(samples: Sequence[Sample]) -> np.ndarray:
    return _pad([s.target for s in samples], IGNORE)


class VLModel(Module):
    kind = "base"
    trainable_prefixes: tuple[str, ...] = ()

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.peft_config = None
        if cfg.d % cfg.heads:
            raise ConfigurationError(f"model width {cfg.d} is not divisible by head count {cfg.heads}")

    # named_parameters skips cfg/peft_config because they hold no tensors

    @property
    def route_dim(self) -> int:
        return self.cfg.d

    def stacks(self) -> dict[str, list[TransformerBlock]]:
        raise NotImplementedError

    def default_route_stacks(self) -> list[str]:
        return list(self.stacks())

    def freeze_backbone(self) -> None:
        for name, p in self.named_parameters():
            p.requires_grad = name.startswith(self.trainable_prefixes)
            if not p.requires_grad:
                p.grad = None
        for _, u in peft_units(self):
            u.unfreeze()

    def signature(self) -> str:
        h = hashlib.sha256()
        h.update(repr(sorted(asdict(self.cfg).items())).encode())
        for name, p in self.named_parameters():
            h.update(f"{name}:{p.shape}:{int(p.requires_grad)};".encode())
        return f"{self.kind}-{h.hexdigest()[:16]}"

    def collate(self, samples: Sequence[Sample]) -> TaskBatch:
        return collate(samples)

    def _routing_feature(self, batch: TaskBatch, default: np.ndarray, source: XRSource) -> RoutingFeature:
        if batch.routing_feature is not None:
            src = batch.xr_source or XRSource.RANDOM_NOISE
            return RoutingFeature(Tensor._wrap(batch.routing_feature[:, None, :].copy()), src)
        return RoutingFeature(Tensor._wrap(default), source)

    def set_capture(self, on: bool) -> None:
        for _, m in self.named_modules():
            if hasattr(m, "_capture"):
                m._capture = on

    def forward(self, batch: TaskBatch) -> Tensor:
        raise NotImplementedError

    def loss(self, batch: TaskBatch) -> Tensor:
        raise NotImplementedError


def _check_visual(cfg: ModelConfig) -> None:
    if cfg.visual_dim != cfg.d:
        raise ConfigurationError(
            f"visual dim {cfg.visual_dim} differs from model width {cfg.d} and this model has no projection"
        )


class EncoderClassifier(VLModel):
    kind = ENCODER_CLASSIFIER
    trainable_prefixes = ("head.",)
    xr_source = XRSource.VISUAL_CLS

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        _check_visual(cfg)
        rng = np.random.default_rng([cfg.seed, 11])
        self.embed = Embedding(cfg.vocab, cfg.d, rng, max_len=cfg.max_len, frozen=True)
        self.blocks = [
            TransformerBlock(cfg.d, cfg.heads, rng, ffn_mult=cfg.ffn_mult, frozen=True) for _ in range(cfg.blocks)
        ]
        self.final_ln = LayerNorm(cfg.d, frozen=True)
        head_rng = np.random.default_rng([cfg.seed, 12])
        self.head = _MLPHead(cfg.d, cfg.head_hidden, cfg.n_classes, head_rng)

    def stacks(self):
        return {"blocks": self.blocks}

    def hidden(self, batch: TaskBatch) -> Tensor:
        vis = Tensor._wrap(batch.visual[:, None, :].copy())
        x = self.embed.add_positions(prepend(vis, self.embed.tokens(batch.tokens)))
        xr = self._routing_feature(batch, vis.data, self.xr_source)
        for blk in self.blocks:
            x = blk(x, xr.raw, batch.task)
        return self.final_ln(x)

    def forward(self, batch: TaskBatch) -> Tensor:
        return self.head(self.hidden(batch)[:, 0, :])

    def loss(self, batch: TaskBatch) -> Tensor:
        return cross_entropy(self.forward(batch), batch.labels)

    def predict(self, batch: TaskBatch) -> np.ndarray:
        with no_grad():
            return np.argmax(self.forward(batch).data, axis=-1)


class _MLPHead(Module):
    """Two linear layers with a ReLU between; the output layer starts at zero (uniform logits)."""

    def __init__(self, d: int, hidden: int, n_out: int, rng: np.random.Generator):
        self.fc1 = LinearMap(d, hidden, rng)
        self.fc2 = LinearMap(hidden, n_out, rng, zero=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))


class _Generative(VLModel):
    """Shared teacher-forcing and decoding plumbing for the two generative models."""

    def collate(self, samples: Sequence[Sample]) -> TaskBatch:
        b = collate(samples)
        b.labels = caption_labels(samples)
        return b

    def loss(self, batch: TaskBatch) -> Tensor:
        logits = self.forward(batch)
        return cross_entropy(logits, batch.labels, ignore_index=IGNORE)

    def _tied_logits(self, h: Tensor) -> Tensor:
        return matmul(h, transpose(self.embed.table))


class DecoderGenerator(_Generative):
    """Causal decoder; input is ``[visual] + prefix tokens + [BOS] + target[:-1]``.

    The loss and outputs cover only the teacher-forced target positions, so
    the prepended visual position and prefix tokens never enter the loss.
    """

    kind = DECODER_GENERATOR
    trainable_prefixes = ()

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        _check_visual(cfg)
        rng = np.random.default_rng([cfg.seed, 21])
        self.embed = Embedding(cfg.vocab, cfg.d, rng, max_len=cfg.max_len, frozen=True)
        self.blocks = [
            TransformerBlock(cfg.d, cfg.heads, rng, causal=True, ffn_mult=cfg.ffn_mult, frozen=True)
            for _ in range(cfg.blocks)
        ]
        self.final_ln = LayerNorm(cfg.d, frozen=True)

    @property
    def xr_source(self) -> XRSource:
        return XRSource.VISUAL_CLS

    def stacks(self):
        return {"blocks": self.blocks}

    def sequence_hidden(self, batch: TaskBatch, dec_in: np.ndarray) -> tuple[Tensor, int]:
        """Hidden states over the whole sequence and the offset of ``dec_in[:, 0]``."""
        ids = np.concatenate([batch.tokens, dec_in], axis=1)
        tok = self.embed.tokens(ids)
        if self.cfg.comparator:
            x = tok
            offset = batch.tokens.shape[1]
            xr = self._routing_feature(batch, batch.grid, XRSource.VISUAL_CLS)
        else:
            vis = Tensor._wrap(batch.visual[:, None, :].copy())
            x = prepend(vis, tok)
            offset = 1 + batch.tokens.shape[1]
            xr = self._routing_feature(batch, vis.data, self.xr_source)
        x = self.embed.add_positions(x)
        for blk in self.blocks:
            x = blk(x, xr.raw, batch.task)
        return self.final_ln(x), offset

    def forward(self, batch: TaskBatch, dec_in: np.ndarray | None = None) -> Tensor:
        dec_in = batch.decoder_in if dec_in is None else dec_in
        h, off = self.sequence_hidden(batch, dec_in)
        return self._tied_logits(h[:, off:, :])

    def full_logits(self, batch: TaskBatch) -> Tensor:
        h, _ = self.sequence_hidden(batch, batch.decoder_in)
        return self._tied_logits(h)

    def full_labels(self, batch: TaskBatch) -> np.ndarray:
        """Labels aligned with :meth:`full_logits`; prepended and prefix positions are IGNORE."""
        lead = batch.tokens.shape[1] + (0 if self.cfg.comparator else 1)
        pad = np.full((batch.size, lead), IGNORE, dtype=np.int64)
        return np.concatenate([pad, batch.labels], axis=1)

    def loss(self, batch: TaskBatch) -> Tensor:
        return cross_entropy(self.full_logits(batch), self.full_labels(batch), ignore_index=IGNORE)


class EncDecMultitask(_Generative):
    kind = ENCDEC_MULTITASK
    trainable_prefixes = ("visual_proj.",)

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        rng = np.random.default_rng([cfg.seed, 31])
        self.embed = Embedding(cfg.vocab, cfg.d, rng, max_len=cfg.max_len, frozen=True)
        self.visual_proj = LinearMap(cfg.visual_dim, cfg.d, np.random.default_rng([cfg.seed, 32]))
        self.encoder = [
            TransformerBlock(cfg.d, cfg.heads, rng, ffn_mult=cfg.ffn_mult, frozen=True) for _ in range(cfg.blocks)
        ]
        self.enc_ln = LayerNorm(cfg.d, frozen=True)
        self.decoder = [
            TransformerBlock(cfg.d, cfg.heads, rng, causal=True, cross=True, ffn_mult=cfg.ffn_mult, frozen=True)
            for _ in range(cfg.decoder_blocks)
        ]
        self.dec_ln = LayerNorm(cfg.d, frozen=True)

    def stacks(self):
        return {"encoder": self.encoder, "decoder": self.decoder}

    def default_route_stacks(self) -> list[str]:
        return ["decoder"]

    def encode(self, batch: TaskBatch) -> tuple[Tensor, Tensor]:
        """Encoder memory ``(B, L, d)`` and the pooled routing feature ``(B, 1, d)``."""
        vis = self.visual_proj(Tensor._wrap(batch.visual[:, None, :].copy()))
        x = self.embed.add_positions(prepend(vis, self.embed.tokens(batch.tokens)))
        if batch.routing_feature is not None:
            if batch.routing_feature.shape[1] != self.cfg.d:
                raise DimensionError("routing override must match model width for encoder-decoder models")
            enc_xr = Tensor._wrap(batch.routing_feature[:, None, :].copy())
        else:
            enc_xr = vis
        for blk in self.encoder:
            x = blk(x, enc_xr, batch.task)
        memory = self.enc_ln(x)
        pooled = enc_xr if batch.routing_feature is not None else mean_rows(memory)
        return memory, pooled

    def forward(self, batch: TaskBatch, dec_in: np.ndarray | None = None, encoded=None) -> Tensor:
        dec_in = batch.decoder_in if dec_in is None else dec_in
        memory, pooled = self.encode(batch) if encoded is None else encoded
        y = self.embed(dec_in)
        for blk in self.decoder:
            y = blk(y, pooled, batch.task, memory=memory)
        return self._tied_logits(self.dec_ln(y))


def build_encoder_classifier(cfg: ModelConfig) -> EncoderClassifier:
    return EncoderClassifier(cfg)


def build_decoder_generator(cfg: ModelConfig) -> DecoderGenerator:
    return DecoderGenerator(cfg)


def build_encdec_multitask(cfg: ModelConfig) -> EncDecMultitask:
    return EncDecMultitask(cfg)


def build_model(cfg: ModelConfig) -> VLModel:
    builders = {
        ENCODER_CLASSIFIER: build_encoder_classifier,
        DECODER_GENERATOR: build_decoder_generator,
        ENCDEC_MULTITASK: build_encdec_multitask,
    }
    if cfg.kind not in builders:
        raise ConfigurationError(f"unknown model kind {cfg.kind!r}; valid kinds are {', '.join(MODEL_KINDS)}")
    return builders[cfg.kind](cfg)


def greedy_decode(model: _Generative, batch: TaskBatch, max_len: int, eos: int = Vocab.EOS) -> list[list[int]]:
    """Argmax decoding from BOS; ties go to the lowest id. EOS is not included in the output."""
    if not isinstance(model, _Generative):
        raise ConfigurationError(f"greedy decoding needs a generative model, got {model.kind}")
    B = batch.size
    outs: list[list[int]] = [[] for _ in range(B)]
    if max_len <= 0:
        return outs
    done = np.zeros(B, dtype=bool)
    dec = np.full((B, 1), Vocab.BOS, dtype=np.int64)
    with no_grad():
        encoded = model.encode(batch) if isinstance(model, EncDecMultitask) else None
        for _ in range(max_len):
            if isinstance(model, EncDecMultitask):
                logits = model.forward(batch, dec, encoded=encoded)
            else:
                logits = model.forward(batch, dec)
            nxt = np.argmax(logits.data[:, -1, :], axis=-1)
            for i in range(B):
                if not done[i]:
                    if nxt[i] == eos:
                        done[i] = True
                    else:
                        outs[i].append(int(nxt[i]))
            if done.all():
                break
            dec = np.concatenate([dec, nxt[:, None]], axis=1)
    return outs
