"""Experiment orchestration: build, train, evaluate, persist, compare."""

from __future__ import annotations

import json
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, _kernels
from . import checkpoint
from .analysis import TimingRecord, time_inference
from .config import ExperimentConfig, from_dict
from .errors import ConfigurationError, PreconditionError
from .models import VLModel, build_model
from .peft import inject
from .routing import RoutingKind
from .tasks import CAPTION, QA, AttributeWorld, Dataset, ablate_visual, gen_caption, gen_multitask, gen_qa
from .training import MetricsRecord, TrainResult, evaluate, primary_metric, train, write_jsonl

MANIFEST = "manifest.json"
METRICS = "metrics.jsonl"
SUMMARY = "summary.json"
INITIAL_CKPT = "initial.ckpt"
FINAL_CKPT = "final.ckpt"

SWEEP_ROUTINGS = ("none", "mul", "add", "proj", "rescale")
SWEEP_PEFT = ("lora", "adapter")


@dataclass(frozen=True)
class RunManifest:
    config: dict
    seeds: dict
    artifacts: dict
    version: str
    backend: str

    def write(self, run_dir: Path) -> Path:
        path = run_dir / MANIFEST
        if path.exists():
            raise ConfigurationError(f"{path} already exists; manifests are write-once (use --force to replace the run)")
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, run_dir: "str | Path") -> "RunManifest":
        path = Path(run_dir) / MANIFEST
        if not path.exists():
            raise PreconditionError(f"no {MANIFEST} in {run_dir}")
        return cls(**json.loads(path.read_text()))

    def experiment_config(self) -> ExperimentConfig:
        return from_dict(self.config)


def build_world(cfg: ExperimentConfig) -> AttributeWorld:
    t = cfg.task
    return AttributeWorld(t.K, t.V_a, t.d_v, t.noise_sigma, seed=t.world_seed)


def build_dataset(cfg: ExperimentConfig, world: AttributeWorld | None = None) -> Dataset:
    t = cfg.task
    world = world or build_world(cfg)
    if t.name == QA:
        ds = gen_qa(world, t.n, seed=t.data_seed)
    elif t.name == CAPTION:
        ds = gen_caption(world, t.n, seed=t.data_seed)
    else:
        ds = gen_multitask(world, t.n, seed=t.data_seed)
    if t.ablation != "none":
        ds = ablate_visual(ds, t.ablation, scope=t.ablation_scope, seed=t.ablation_seed)
    return ds


def build(cfg: ExperimentConfig) -> VLModel:
    return inject(build_model(cfg.model), cfg.peft_config())


def routing_label(cfg: ExperimentConfig) -> str:
    r = cfg.peft.routing
    if isinstance(r, dict):
        return ",".join(f"{k}:{v}" for k, v in sorted(r.items()))
    return RoutingKind.parse(r).value


def is_baseline(cfg: ExperimentConfig) -> bool:
    return not cfg.peft_config().is_routed()


@dataclass
class RunResult:
    config: ExperimentConfig
    model: VLModel
    dataset: Dataset
    train: TrainResult
    eval: list[MetricsRecord]
    run_dir: Path | None = None
    seconds: float = 0.0

    def metric(self, task: str | None = None) -> float:
        recs = self.eval if task is None else [r for r in self.eval if r.task == task]
        if len(recs) != 1:
            raise PreconditionError(f"expected one eval record, found {len(recs)}; pass a task")
        return primary_metric(recs[0])


def run_experiment(cfg: ExperimentConfig, *, run_dir: "str | Path | None" = None, force: bool = False,
                   on_record=None) -> RunResult:
    """Train and evaluate one config. With ``run_dir`` every artifact is written there.

    The manifest lands on disk before the first optimizer step.
    """
    out = None
    if run_dir is not None:
        out = Path(run_dir)
        if out.exists() and any(out.iterdir()):
            if not force:
                raise ConfigurationError(f"run directory {out} is not empty (use --force to replace it)")
            shutil.rmtree(out)
        out.mkdir(parents=True, exist_ok=True)
        RunManifest(
            config=cfg.to_dict(),
            seeds={"model": cfg.model.seed, "peft": cfg.peft.seed, "world": cfg.task.world_seed,
                   "data": cfg.task.data_seed, "ablation": cfg.task.ablation_seed, "train": cfg.train.seed},
            artifacts={"metrics": METRICS, "summary": SUMMARY, "initial_checkpoint": INITIAL_CKPT,
                       "final_checkpoint": FINAL_CKPT},
            version=__version__,
            backend=_kernels.BACKEND,
        ).write(out)
    t0 = time.perf_counter()
    dataset = build_dataset(cfg)
    model = build(cfg)
    result = train(model, dataset, cfg.train.to_train_config(), seed=cfg.train.seed, on_record=on_record)
    records = evaluate(model, dataset.val, step=cfg.train.steps)
    seconds = time.perf_counter() - t0
    if out is not None:
        (out / INITIAL_CKPT).write_bytes(result.initial_checkpoint)
        (out / FINAL_CKPT).write_bytes(result.final_checkpoint)
        write_jsonl(result.metrics + records, out / METRICS)
        (out / SUMMARY).write_text(json.dumps(_summary(cfg, model, records, seconds), indent=2) + "\n")
    return RunResult(cfg, model, dataset, result, records, out, seconds)


def _summary(cfg: ExperimentConfig, model: VLModel, records: Sequence[MetricsRecord], seconds: float) -> dict:
    return {
        "signature": model.signature(),
        "peft": cfg.peft.kind,
        "routing": routing_label(cfg),
        "ablation": cfg.task.ablation,
        "eval": [asdict(r) for r in records],
        "seconds": seconds,
    }


def eval_run(run_dir: "str | Path", ckpt: "str | Path | None" = None) -> list[MetricsRecord]:
    """Rebuild a run's model from its manifest, load a checkpoint, evaluate on validation."""
    run_dir = Path(run_dir)
    cfg = RunManifest.read(run_dir).experiment_config()
    model = build(cfg)
    checkpoint.load(model, ckpt if ckpt is not None else run_dir / FINAL_CKPT)
    return evaluate(model, build_dataset(cfg).val, step=cfg.train.steps)


# ---------------------------------------------------------------- comparisons


@dataclass
class ReportRow:
    label: str
    peft: str
    routing: str
    task: str
    metric: str
    value: float
    baseline: float
    delta: float  # points, improvement positive


@dataclass
class Report:
    rows: list[ReportRow] = field(default_factory=list)

    def to_text(self) -> str:
        head = ["run", "peft", "routing", "task", "metric", "value", "baseline", "delta"]
        body = [[r.label, r.peft, r.routing, r.task, r.metric, f"{100 * r.value:.2f}", f"{100 * r.baseline:.2f}",
                 f"{r.delta:+.2f}"] for r in self.rows]
        widths = [max([len(h)] + [len(b[i]) for b in body]) for i, h in enumerate(head)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(head, widths))]
        lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
        return "\n".join(lines)

    def to_records(self) -> list[dict]:
        return [asdict(r) for r in self.rows]


@dataclass
class _Entry:
    label: str
    peft: str
    routing: str
    baseline: bool
    metrics: dict  # (task, metric name) -> value


def _entry_from_summary(label: str, summary: dict) -> _Entry:
    metrics = {}
    for rec in summary["eval"]:
        name = "accuracy" if rec.get("accuracy") is not None else "exact_match"
        metrics[(rec["task"], name)] = rec[name]
    routing = summary["routing"]
    base = all(part.split(":")[-1] == "none" for part in routing.split(","))
    if summary.get("ablation", "none") != "none":
        routing = f"{routing}/{summary['ablation']}"
        base = False
    return _Entry(label, summary["peft"], routing, base, metrics)


def compare(entries: Sequence[_Entry], *, include_baselines: bool = False) -> Report:
    """Deltas of every entry against the routing-None entry of the same PEFT kind.

    The first baseline of each kind is the reference. It gets a (zero-delta)
    row only with ``include_baselines``; any later entry, including a repeat
    of the baseline, always gets one.
    """
    refs: dict[str, _Entry] = {}
    for e in entries:
        if e.baseline and e.peft not in refs:
            refs[e.peft] = e
    rows = []
    for e in entries:
        if refs.get(e.peft) is e and not include_baselines:
            continue
        ref = refs.get(e.peft)
        if ref is None:
            raise PreconditionError(f"no routing-None baseline run for PEFT kind {e.peft!r} (needed by {e.label})")
        for (task, name), value in sorted(e.metrics.items()):
            if (task, name) not in ref.metrics:
                raise PreconditionError(f"baseline {ref.label} has no {name} for task {task!r}")
            b = ref.metrics[(task, name)]
            rows.append(ReportRow(e.label, e.peft, e.routing, task, name, value, b, 100.0 * (value - b)))
    return Report(rows)


def report(run_dirs: Sequence["str | Path"]) -> Report:
    entries = []
    for d in run_dirs:
        d = Path(d)
        RunManifest.read(d)
        summary = json.loads((d / SUMMARY).read_text())
        entries.append(_entry_from_summary(d.name, summary))
    if not any(e.baseline for e in entries):
        raise PreconditionError("report needs a routing-None baseline run among the inputs")
    return compare(entries)


def _entry(label: str, res: RunResult) -> _Entry:
    return _entry_from_summary(label, _summary(res.config, res.model, res.eval, res.seconds))


def _progress(label: str, res: RunResult) -> str:
    parts = [f"{r.task} {100 * primary_metric(r):.2f}" for r in res.eval]
    return f"{label}: {', '.join(parts)} ({res.seconds:.1f}s)"


def sweep(cfg: ExperimentConfig, *, out_root: "str | Path | None" = None, force: bool = False,
          routings: Sequence[str] = SWEEP_ROUTINGS, pefts: Sequence[str] = SWEEP_PEFT,
          log=None) -> tuple[Report, list[RunResult]]:
    """Every routing kind (plus None) for each PEFT kind; a Table-1-shaped grid."""
    results, entries = [], []
    for peft in pefts:
        for routing in routings:
            label = f"{peft}-{routing}"
            c = cfg.replace(peft={"kind": peft, "routing": routing}, output={"dir": str(Path(cfg.output.dir) / label)})
            res = run_experiment(c, run_dir=None if out_root is None else Path(out_root) / label, force=force)
            results.append(res)
            entries.append(_entry(label, res))
            if log:
                log(_progress(label, res))
    return compare(entries, include_baselines=True), results


def ablate(cfg: ExperimentConfig, *, out_root: "str | Path | None" = None, force: bool = False,
           modes: Sequence[str] = ("noise", "ones"), log=None) -> tuple[Report, list[RunResult]]:
    """Routing-None baseline, then the routed config with the true, noise, and ones x_R."""
    if is_baseline(cfg):
        raise ConfigurationError("ablate needs a routed config (peft.routing is none)")
    plan = [("none-cls", {"peft": {"routing": "none"}, "task": {"ablation": "none"}}),
            (f"{routing_label(cfg)}-cls", {"task": {"ablation": "none"}})]
    plan += [(f"{routing_label(cfg)}-{m}", {"task": {"ablation": m}}) for m in modes]
    results, entries = [], []
    for label, changes in plan:
        c = cfg.replace(**changes)
        res = run_experiment(c, run_dir=None if out_root is None else Path(out_root) / label, force=force)
        results.append(res)
        entries.append(_entry(label, res))
        if log:
            log(_progress(label, res))
    return compare(entries, include_baselines=True), results


def timing_pair(cfg: ExperimentConfig, *, routing: str | None = None, batch_size: int = 256, reps: int = 7,
                warmup: int = 2, rounds: int = 3) -> tuple[TimingRecord, TimingRecord]:
    """(unrouted, routed) per-sample inference medians on the same batch, measured in alternation."""
    routed_cfg = cfg if routing is None else cfg.replace(peft={"routing": routing})
    base_cfg = cfg.replace(peft={"routing": "none"})
    ds = build_dataset(cfg)
    pool = ds.val if len(ds.val) >= batch_size else ds.samples
    task = pool[0].task
    samples = [s for s in pool if s.task == task][:batch_size]
    models = {"none": build(base_cfg), routing_label(routed_cfg): build(routed_cfg)}
    batch = next(iter(models.values())).collate(samples)
    runs: dict[str, list[float]] = {k: [] for k in models}
    for _ in range(rounds):
        for label, model in models.items():
            runs[label].extend(time_inference(model, batch, reps=reps, warmup=warmup, label=label).samples)
    base, routed = (TimingRecord(k, float(np.median(v)), len(v), warmup * rounds, v) for k, v in runs.items())
    return base, routed
