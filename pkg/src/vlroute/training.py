"""AdamW with linear warmup/decay, the training loop, and evaluation."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import _kernels as K
from . import checkpoint
from .errors import NonFiniteLossError, PreconditionError, ScheduleError
from .models import EncoderClassifier, VLModel, greedy_decode
from .tasks import Dataset, Sample, task_batches
from .tensor import Graph, Tensor, cross_entropy, no_grad


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 3e-3
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_every: int = 100


class LinearSchedule:
    """0 -> peak linearly over ``warmup`` steps, then linearly to 0 at ``total``."""

    def __init__(self, peak: float, warmup: int, total: int):
        if total < 0 or warmup < 0 or warmup > total:
            raise ScheduleError(f"invalid schedule: warmup={warmup}, total={total}")
        self.peak = float(peak)
        self.warmup = int(warmup)
        self.total = int(total)

    def __call__(self, step: int) -> float:
        if step < 0 or step >= self.total:
            raise ScheduleError(f"step {step} is outside the schedule of {self.total} steps")
        if step < self.warmup:
            return self.peak * (step / self.warmup)
        # ratio first so the peak step returns exactly ``peak``
        return self.peak * ((self.total - step) / (self.total - self.warmup))


class AdamW:
    """Adam with decoupled weight decay; each parameter keeps its own step count.

    Parameters whose ``grad`` is ``None`` at a step are left untouched, which
    keeps per-task units isolated in multi-unit training.
    """

    def __init__(self, params: Sequence[Tensor], schedule: LinearSchedule, *, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.schedule = schedule
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros(p.size) for p in self.params]
        self.v = [np.zeros(p.size) for p in self.params]
        self.counts = [0] * len(self.params)
        self.step_count = 0

    @property
    def lr(self) -> float:
        return self.schedule(self.step_count)

    def step(self) -> None:
        lr = self.schedule(self.step_count)
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            if not p.data.flags.c_contiguous:
                raise PreconditionError("optimizer parameters must be C-contiguous")
            self.counts[i] += 1
            t = self.counts[i]
            bc1 = 1.0 - self.beta1**t
            bc2 = 1.0 - self.beta2**t
            K.adamw_update(p.data.reshape(-1), np.ascontiguousarray(p.grad).reshape(-1), self.m[i], self.v[i],
                           lr, self.beta1, self.beta2, self.eps, self.weight_decay, bc1, bc2)
        self.step_count += 1

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class MetricsRecord:
    step: int
    task: str
    loss: float
    accuracy: float | None = None
    exact_match: float | None = None
    token_accuracy: float | None = None
    lr: float | None = None
    phase: str = "train"
    n: int = 0
    wall_time: float = field(default=0.0, compare=False)

    def to_json(self, *, timing: bool = False) -> str:
        """One JSON line; wall time is left out unless asked for, so streams compare byte for byte."""
        d = asdict(self)
        if not timing:
            d.pop("wall_time")
        return json.dumps(d)


@dataclass
class TrainResult:
    model: VLModel
    metrics: list[MetricsRecord]
    initial_checkpoint: bytes
    final_checkpoint: bytes


def _batch_stream(samples: Sequence[Sample], batch_size: int, rng: np.random.Generator) -> Iterator[list[Sample]]:
    while True:
        yield from task_batches(samples, batch_size, rng)


def _batch_accuracy(model: VLModel, batch, logits: Tensor) -> float | None:
    if isinstance(model, EncoderClassifier):
        return float(np.mean(np.argmax(logits.data, axis=-1) == batch.labels))
    return None


def train(model: VLModel, dataset: Dataset, cfg: TrainConfig, seed: int = 0, *,
          on_record=None) -> TrainResult:
    """Deterministic training on ``dataset.train``; no dropout, seeded shuffling."""
    initial = checkpoint.to_bytes(model, seed=seed, step=0)
    params = [p for _, p in model.trainable_parameters()]
    warmup = int(round(cfg.warmup_frac * cfg.steps))
    opt = AdamW(params, LinearSchedule(cfg.lr, warmup, cfg.steps), beta1=cfg.beta1, beta2=cfg.beta2,
                eps=cfg.eps, weight_decay=cfg.weight_decay)
    samples = dataset.train
    if not samples:
        raise PreconditionError("training split is empty")
    stream = _batch_stream(samples, cfg.batch_size, np.random.default_rng([seed, 7]))
    records: list[MetricsRecord] = []
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        batch = model.collate(next(stream))
        opt.zero_grad()
        lr = opt.lr
        with Graph() as g:
            if isinstance(model, EncoderClassifier):
                logits = model.forward(batch)
                loss = cross_entropy(logits, batch.labels)
            else:
                logits = None
                loss = model.loss(batch)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(step, value)
            g.backward(loss)
        opt.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            rec = MetricsRecord(
                step=step, task=batch.task, loss=value,
                accuracy=None if logits is None else _batch_accuracy(model, batch, logits),
                lr=lr, phase="train", n=batch.size, wall_time=time.perf_counter() - t0,
            )
            records.append(rec)
            if on_record is not None:
                on_record(rec)
    final = checkpoint.to_bytes(model, seed=seed, step=cfg.steps)
    return TrainResult(model, records, initial, final)


def evaluate(model: VLModel, samples: Sequence[Sample], *, batch_size: int = 256, step: int = -1,
             max_len: int | None = None) -> list[MetricsRecord]:
    """One record per task (sorted by tag); counts are order independent."""
    if not samples:
        raise PreconditionError("evaluation set is empty")
    by_task: dict[str, list[Sample]] = {}
    for s in samples:
        by_task.setdefault(s.task, []).append(s)
    out = []
    for task in sorted(by_task):
        group = by_task[task]
        loss_sum = 0.0
        hits = tok_hits = tok_total = exact = 0
        for i in range(0, len(group), batch_size):
            chunk = group[i:i + batch_size]
            batch = model.collate(chunk)
            with no_grad():
                loss_sum += model.loss(batch).item() * len(chunk)
                if isinstance(model, EncoderClassifier):
                    pred = np.argmax(model.forward(batch).data, axis=-1)
                    hits += int((pred == batch.labels).sum())
                else:
                    limit = max_len if max_len is not None else max(len(s.target) for s in chunk)
                    decoded = greedy_decode(model, batch, limit)
                    for s, seq in zip(chunk, decoded):
                        ref = [int(t) for t in s.target[:-1]]
                        exact += seq == ref
                        tok_total += len(ref)
                        tok_hits += sum(a == b for a, b in zip(seq, ref))
        n = len(group)
        if isinstance(model, EncoderClassifier):
            rec = MetricsRecord(step=step, task=task, loss=loss_sum / n, accuracy=hits / n, phase="eval", n=n)
        else:
            rec = MetricsRecord(step=step, task=task, loss=loss_sum / n, exact_match=exact / n,
                                token_accuracy=tok_hits / max(tok_total, 1), phase="eval", n=n)
        out.append(rec)
    return out


def primary_metric(rec: MetricsRecord) -> float:
    return rec.accuracy if rec.accuracy is not None else rec.exact_match


def write_jsonl(records: Iterable[MetricsRecord], path: "str | Path") -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_jsonl(path: "str | Path") -> list[MetricsRecord]:
    with open(path) as fh:
        return [MetricsRecord(**json.loads(line)) for line in fh if line.strip()]


def format_table(records: Sequence[MetricsRecord]) -> str:
    cols = ["phase", "step", "task", "loss", "accuracy", "exact_match", "token_accuracy", "lr", "n"]
    rows = [[_fmt(getattr(r, c)) for c in cols] for r in records]
    widths = [max(len(c), *(len(row[i]) for row in rows)) if rows else len(c) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in rows]
    return "\n".join(lines)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}" if abs(v) >= 1e-3 or v == 0 else f"{v:.2e}"
    return str(v)
