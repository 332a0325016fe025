"""Measurement tools: weight drift, attention inspection, timing, parameter budgets."""

from __future__ import annotations

import json
import re
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint
from .errors import CheckpointError, InvariantError, PreconditionError
from .models import DecoderGenerator, EncDecMultitask, EncoderClassifier, TaskBatch, VLModel
from .peft import Chain, PeftKind, PeftUnit, analytic_unit_count
from .routing import LINEAR_KINDS, RoutingKind
from .tasks import Sample, Vocab
from .tensor import no_grad

# ---------------------------------------------------------------- drift

_UNIT_ARRAY = re.compile(r"^(?P<unit>(?P<stack>[^.]+)\.(?P<layer>\d+)\..*\.units\.[^.]+)\.(?P<arr>\w+)$")
_DOWN_NAMES = ("w_down", "w_q")  # cross-attention units have no w_down; w_q is their input map


@dataclass(frozen=True)
class DriftRecord:
    stack: str
    layer: int
    unit: str
    delta_down: float
    delta_up: float
    ratio: float | None


def _frob(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm((a - b).ravel()))


def weight_drift(initial, final) -> list[DriftRecord]:
    """Frobenius drift of each unit's down and up maps between two checkpoints.

    Accepts paths, bytes or parsed checkpoints. Records come out in stack
    order, then by layer, then in archive order.
    """
    a = checkpoint.read(initial)
    b = checkpoint.read(final)
    if a.signature != b.signature:
        raise CheckpointError(f"architecture signature mismatch: {a.signature} vs {b.signature}")
    units: dict[str, dict] = {}
    stack_order: dict[str, int] = {}
    for name, arr in a.arrays.items():
        m = _UNIT_ARRAY.match(name)
        if m is None or m["arr"] not in (*_DOWN_NAMES, "w_up"):
            continue
        if name not in b.arrays:
            raise CheckpointError(f"array {name!r} missing from the second checkpoint")
        stack_order.setdefault(m["stack"], len(stack_order))
        entry = units.setdefault(m["unit"], {"stack": m["stack"], "layer": int(m["layer"])})
        key = "up" if m["arr"] == "w_up" else "down"
        entry[key] = _frob(b.arrays[name], arr)
    out = []
    for unit, e in units.items():
        down, up = e.get("down", 0.0), e.get("up", 0.0)
        out.append(DriftRecord(e["stack"], e["layer"], unit, down, up, down / up if up > 0 else None))
    out.sort(key=lambda r: (stack_order[r.stack], r.layer))
    return out


def drift_series(records: Sequence[DriftRecord]) -> dict[str, list]:
    """Column lists for plotting elsewhere."""
    cols = ("stack", "layer", "unit", "delta_down", "delta_up", "ratio")
    return {c: [getattr(r, c) for r in records] for c in cols}


def drift_table(records: Sequence[DriftRecord]) -> str:
    rows = [[r.stack, str(r.layer), r.unit, f"{r.delta_down:.6g}", f"{r.delta_up:.6g}",
             "-" if r.ratio is None else f"{r.ratio:.4g}"] for r in records]
    return _align(["stack", "layer", "unit", "dW_down", "dW_up", "ratio"], rows)


# ---------------------------------------------------------------- attention


@dataclass
class AttentionRow:
    layer: int
    position: int
    labels: list[str]
    weights: np.ndarray

    def pairs(self) -> list[tuple[str, float]]:
        return list(zip(self.labels, self.weights.tolist()))


def _inspect_plan(model: VLModel, batch: TaskBatch, vocab: Vocab | None):
    """(attention module list, labels for the keys) for the given model."""
    def names(ids):
        return [vocab.name(int(t)) if vocab else f"#{int(t)}" for t in ids]

    text = names(batch.tokens[0])
    if isinstance(model, EncoderClassifier):
        return [b.attn for b in model.blocks], ["IMAGE"] + text
    if isinstance(model, DecoderGenerator):
        dec = names(batch.decoder_in[0])
        lead = [] if model.cfg.comparator else ["IMAGE"]
        return [b.attn for b in model.blocks], lead + text + dec
    if isinstance(model, EncDecMultitask):
        # decoder cross-attention reads the encoder memory, whose first slot is the image
        return [b.cross_attn for b in model.decoder], ["IMAGE"] + text
    raise PreconditionError(f"attention inspection does not support {model.kind}")


def attention_inspect(model: VLModel, sample: "Sample | TaskBatch", layer: int, position: int | None = None,
                      *, vocab: Vocab | None = None) -> AttentionRow:
    """Head-averaged attention of one query position in one layer.

    ``position`` defaults to the readout position: 0 for the classifier and
    the final position for generative models.
    """
    batch = model.collate([sample]) if isinstance(sample, Sample) else sample
    mods, labels = _inspect_plan(model, batch, vocab)
    if not -len(mods) <= layer < len(mods):
        raise IndexError(f"layer {layer} out of range for {len(mods)} layers")
    model.set_capture(True)
    try:
        with no_grad():
            model.forward(batch)
        weights = mods[layer]._last_weights
    finally:
        model.set_capture(False)
    row_len = weights.shape[-2]
    if position is None:
        position = 0 if isinstance(model, EncoderClassifier) else row_len - 1
    if not -row_len <= position < row_len:
        raise IndexError(f"position {position} out of range for {row_len} query positions")
    avg = weights[0, :, position, :].mean(axis=0)
    return AttentionRow(layer % len(mods), position % row_len, labels[: avg.shape[0]], avg)


# ---------------------------------------------------------------- timing


@dataclass
class TimingRecord:
    label: str
    ms_per_sample: float
    reps: int
    warmup: int
    samples: list[float] = field(default_factory=list, repr=False)  # per-rep ms/sample

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def time_inference(model: VLModel, batch: TaskBatch, *, reps: int = 7, warmup: int = 2,
                   label: str = "") -> TimingRecord:
    """Median wall-clock per sample of a no-grad forward pass, pinned to one BLAS thread."""
    if reps < 3:
        raise PreconditionError(f"timing needs at least 3 repetitions, got {reps}")
    per_rep = []
    with threadpool_limits(limits=1), no_grad():
        for _ in range(warmup):
            model.forward(batch)
        for _ in range(reps):
            t0 = time.perf_counter()
            model.forward(batch)
            per_rep.append((time.perf_counter() - t0) * 1e3 / batch.size)
    return TimingRecord(label, float(np.median(per_rep)), reps, warmup, per_rep)


def overhead(routed: TimingRecord, base: TimingRecord) -> float:
    """Relative slowdown of ``routed`` over ``base`` (0.1 means 10% slower)."""
    return routed.ms_per_sample / base.ms_per_sample - 1.0


# ---------------------------------------------------------------- budgets


@dataclass(frozen=True)
class BudgetConfig:
    label: str
    kind: str = "lora"
    d: int = 32
    r: int = 4
    routing: str = "none"
    share_down: bool = True
    chain: str = "standard"
    bias: bool | None = None


@dataclass
class BudgetRow:
    label: str
    kind: str
    d: int
    r: int
    routing: str
    chain: str
    share_down: bool
    params: int


@dataclass
class BudgetTable:
    rows: list[BudgetRow]
    checks: list[str]

    def to_text(self) -> str:
        cols = ["label", "kind", "d", "r", "routing", "chain", "share_down", "params"]
        body = [[str(getattr(r, c)) for c in cols] for r in self.rows]
        return _align(cols, body) + "\n" + "\n".join(f"ok: {c}" for c in self.checks)

    def to_records(self) -> list[dict]:
        return [asdict(r) for r in self.rows]


def unit_params(cfg: BudgetConfig) -> int:
    """Count by constructing the unit, cross-checked against the closed form."""
    rng = np.random.default_rng(0)
    unit = PeftUnit(cfg.kind, cfg.d, cfg.d, cfg.r, rng, routing=cfg.routing, share_down=cfg.share_down,
                    chain=cfg.chain, bias=cfg.bias)
    n = unit.num_parameters()
    closed = analytic_unit_count(cfg.kind, cfg.d, cfg.r, routing=cfg.routing, share_down=cfg.share_down,
                                 chain=cfg.chain, bias=cfg.bias)
    if n != closed:
        raise InvariantError(f"{cfg.label}: constructed unit has {n} parameters, closed form gives {closed}")
    return n


def budget_table(configs: Sequence[BudgetConfig]) -> BudgetTable:
    """Per-unit trainable counts plus the ordering checks that apply to the given set.

    Checked within each (kind, d, r, bias) group:
      routed linear kinds equal the unrouted unit (shared down map);
      every linear routing <= the cross-attention unit;
      quarter-chain cross-attention < standard-chain cross-attention.
    """
    rows = []
    for c in configs:
        rows.append(BudgetRow(c.label, PeftKind.parse(c.kind).value, c.d, c.r, RoutingKind.parse(c.routing).value,
                              Chain.parse(c.chain).value, c.share_down, unit_params(c)))
    checks = []
    groups: dict[tuple, list[tuple[BudgetConfig, BudgetRow]]] = {}
    for c, row in zip(configs, rows):
        groups.setdefault((row.kind, c.d, c.r, c.bias), []).append((c, row))
    for key, members in groups.items():
        tag = f"{key[0]} d={key[1]} r={key[2]}"
        std = [(c, r) for c, r in members if r.chain == "standard"]
        base = [r for c, r in std if r.routing == "none"]
        linear = [r for c, r in std if RoutingKind(r.routing) in LINEAR_KINDS + (RoutingKind.RELU_PROJ_MUL,)]
        ca_full = [r for c, r in std if r.routing == "cross_attn"]
        ca_quarter = [r for c, r in members if r.chain == "quarter" and r.routing == "cross_attn"]
        for b in base:
            for r in linear:
                shared = next(c for c, rr in members if rr is r).share_down
                if shared and r.params != b.params:
                    raise InvariantError(f"{tag}: {r.label} has {r.params} parameters, unrouted has {b.params}")
            if linear:
                checks.append(f"{tag}: routed == unrouted ({b.params})")
        for ca in ca_full:
            for r in linear:
                if r.params > ca.params:
                    raise InvariantError(f"{tag}: {r.label} ({r.params}) exceeds cross-attention ({ca.params})")
            if linear:
                checks.append(f"{tag}: routing <= cross-attention ({ca.params})")
            for q in ca_quarter:
                if not q.params < ca.params:
                    raise InvariantError(f"{tag}: quarter chain ({q.params}) is not below full rank ({ca.params})")
                checks.append(f"{tag}: quarter chain {q.params} < full-rank cross-attention {ca.params}")
    return BudgetTable(rows, checks)


def default_budget_configs(d: int = 32, r: int = 4) -> list[BudgetConfig]:
    """The standard comparison set: every routing kind for both PEFT kinds plus the comparators."""
    out = []
    for kind in ("lora", "adapter"):
        bias = False if kind == "adapter" else None
        for rk in RoutingKind:
            out.append(BudgetConfig(f"{kind}/{rk.value}", kind, d, r, rk.value, bias=bias))
        out.append(BudgetConfig(f"{kind}/proj+sep", kind, d, r, "proj", share_down=False, bias=bias))
        if r % 4 == 0:
            out.append(BudgetConfig(f"{kind}/cross_attn+quarter", kind, d, r, "cross_attn", chain="quarter",
                                    bias=bias))
    return out


def _align(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max([len(h)] + [len(r[i]) for r in rows]) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows]
    return "\n".join(lines)
