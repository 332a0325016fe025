"""Experiment configuration: strict TOML sections with dotted overrides.

Grammar (TOML)::

    [model]   kind, d, heads, blocks, decoder_blocks, vocab, max_len, d_visual,
              n_classes, head_hidden, ffn_mult, comparator, seed
    [peft]    kind, r, alpha, routing, share_down, chain, nonlinearity, bias,
              pool, sites, multi_unit, stacks, route_stacks, seed
              routing is a kind string or a table {task = kind}; a table
              implies multi_unit = true
    [task]    name (qa | caption | multitask), K, V_a, d_v, noise_sigma, n,
              world_seed, data_seed, ablation (none | noise | ones),
              ablation_scope (xr | both), ablation_seed
    [train]   steps, batch_size, lr, warmup_frac, weight_decay, beta1, beta2,
              eps, log_every, seed
    [output]  dir (relative paths resolve under $VLROUTE_OUT, default "runs")

Every section and key is optional; unknown ones are rejected. Overrides use
``section.key=value`` with the value parsed as a TOML literal (falling back
to a bare string).
"""

from __future__ import annotations

import copy
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigurationError
from .models import ENCDEC_MULTITASK, ENCODER_CLASSIFIER, MODEL_KINDS, ModelConfig
from .peft import Chain, PeftConfig, PeftKind
from .routing import RoutingKind
from .tasks import ABLATION_MODES, ABLATION_SCOPES, CAPTION, QA, Vocab
from .training import TrainConfig

OUT_ENV = "VLROUTE_OUT"
TASK_NAMES = (QA, CAPTION, "multitask")


@dataclass
class PeftSection:
    kind: str = "lora"
    r: int = 4
    alpha: float | None = None
    routing: str | dict[str, str] = "none"
    share_down: bool = True
    chain: str = "standard"
    nonlinearity: str = "relu"
    bias: bool | None = None
    pool: bool = True
    sites: list[str] = field(default_factory=lambda: ["q", "v"])
    multi_unit: bool = False
    stacks: list[str] | None = None
    route_stacks: list[str] | None = None
    seed: int = 0


@dataclass
class TaskSection:
    name: str = QA
    K: int = 4
    V_a: int = 4
    d_v: int = 32
    noise_sigma: float = 0.1
    n: int = 4000
    world_seed: int = 0
    data_seed: int = 0
    ablation: str = "none"
    ablation_scope: str = "xr"
    ablation_seed: int = 0


@dataclass
class TrainSection:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 3e-3
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_every: int = 100
    seed: int = 0

    def to_train_config(self) -> TrainConfig:
        d = dataclasses.asdict(self)
        d.pop("seed")
        return TrainConfig(**d)


@dataclass
class OutputSection:
    dir: str = "run"


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    peft: PeftSection = field(default_factory=PeftSection)
    task: TaskSection = field(default_factory=TaskSection)
    train: TrainSection = field(default_factory=TrainSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self, resolved: bool = True) -> dict:
        """Plain data; ``resolved`` fills derived defaults (alpha = r) as they will be used."""
        data = dataclasses.asdict(self)
        if resolved and data["peft"]["alpha"] is None:
            data["peft"]["alpha"] = float(self.peft.r)
        return data

    @property
    def alpha(self) -> float:
        return float(self.peft.r) if self.peft.alpha is None else self.peft.alpha

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @property
    def tasks(self) -> list[str]:
        return [QA, CAPTION] if self.task.name == "multitask" else [self.task.name]

    def peft_config(self) -> PeftConfig:
        p = self.peft
        return PeftConfig(
            kind=p.kind, r=p.r, alpha=self.alpha, routing=p.routing, share_down=p.share_down, chain=p.chain,
            nonlinearity=p.nonlinearity, bias=p.bias, pool=p.pool, sites=tuple(p.sites),
            stacks=p.stacks, route_stacks=p.route_stacks,
            tasks=tuple(self.tasks) if p.multi_unit else None, seed=p.seed,
        )

    def run_dir(self) -> Path:
        path = Path(self.output.dir)
        return path if path.is_absolute() else Path(os.environ.get(OUT_ENV, "runs")) / path

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with some section fields replaced, e.g. ``replace(peft={"routing": "none"})``."""
        data = self.to_dict(resolved=False)
        for sec, values in sections.items():
            data[sec].update(values)
        return from_dict(data)


SECTIONS = {
    "model": ModelConfig,
    "peft": PeftSection,
    "task": TaskSection,
    "train": TrainSection,
    "output": OutputSection,
}


def _check_type(where: str, value, annotation: str):
    """Coerce/validate one scalar against the field annotation string."""
    ann = annotation.replace(" ", "")
    optional = "None" in ann
    if value is None:
        if optional:
            return None
        raise ConfigurationError(f"{where} may not be null")
    if "dict" in ann:  # routing: str or table
        if isinstance(value, str):
            return value
        if isinstance(value, Mapping) and all(isinstance(v, str) for v in value.values()):
            return dict(value)
        raise ConfigurationError(f"{where} must be a routing kind string or a table of task = kind")
    if ann.startswith("list"):
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigurationError(f"{where} must be a list of strings")
        return list(value)
    if ann.startswith("bool"):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where} must be true or false, got {value!r}")
        return value
    if ann.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where} must be an integer, got {value!r}")
        return value
    if ann.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where} must be a number, got {value!r}")
        return float(value)
    if ann.startswith("str"):
        if not isinstance(value, str):
            raise ConfigurationError(f"{where} must be a string, got {value!r}")
        return value
    raise ConfigurationError(f"{where}: unsupported field type {annotation}")  # pragma: no cover


def from_dict(data: Mapping[str, Any]) -> ExperimentConfig:
    """Build and validate; unknown sections/keys raise :class:`ConfigurationError` naming them."""
    sections = {}
    for sec in data:
        if sec not in SECTIONS:
            raise ConfigurationError(f"unknown section [{sec}]; valid sections are {', '.join(SECTIONS)}")
    for sec, cls in SECTIONS.items():
        raw = data.get(sec, {})
        if not isinstance(raw, Mapping):
            raise ConfigurationError(f"[{sec}] must be a table")
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for key, value in raw.items():
            if key not in fields:
                raise ConfigurationError(f"unknown key {sec}.{key}; valid keys are {', '.join(fields)}")
            values[key] = _check_type(f"{sec}.{key}", value, str(fields[key].type))
        sections[sec] = cls(**values)
    cfg = ExperimentConfig(**sections)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    """Cross-field checks, run before any compute. A routing table switches on multi_unit."""
    m, p, t = cfg.model, cfg.peft, cfg.task
    if m.kind not in MODEL_KINDS:
        raise ConfigurationError(f"model.kind {m.kind!r} is invalid; valid kinds are {', '.join(MODEL_KINDS)}")
    PeftKind.parse(p.kind)
    Chain.parse(p.chain)
    if isinstance(p.routing, dict):
        for task, kind in p.routing.items():
            if task not in (QA, CAPTION):
                raise ConfigurationError(f"peft.routing names unknown task {task!r}")
            RoutingKind.parse(kind)
        missing = [x for x in cfg.tasks if x not in p.routing]
        if missing:
            raise ConfigurationError(f"peft.routing has no entry for task(s) {', '.join(missing)}")
        p.multi_unit = True
    else:
        RoutingKind.parse(p.routing)
    if p.r < 1:
        raise ConfigurationError(f"peft.r must be positive, got {p.r}")
    if t.name not in TASK_NAMES:
        raise ConfigurationError(f"task.name {t.name!r} is invalid; valid names are {', '.join(TASK_NAMES)}")
    if t.ablation not in ("none",) + ABLATION_MODES:
        raise ConfigurationError(f"task.ablation {t.ablation!r} is invalid; valid modes are none, "
                                 f"{', '.join(ABLATION_MODES)}")
    if t.ablation_scope not in ABLATION_SCOPES:
        raise ConfigurationError(f"task.ablation_scope {t.ablation_scope!r} is invalid; valid scopes are "
                                 f"{', '.join(ABLATION_SCOPES)}")
    for key in ("K", "V_a", "d_v", "n"):
        if getattr(t, key) < 1:
            raise ConfigurationError(f"task.{key} must be positive")
    if t.noise_sigma < 0:
        raise ConfigurationError("task.noise_sigma must be non-negative")
    if (m.d_visual if m.d_visual is not None else m.d) != t.d_v:
        if m.d_visual is None and m.kind == ENCDEC_MULTITASK:
            m.d_visual = t.d_v
        else:
            raise ConfigurationError(f"task.d_v={t.d_v} does not match the model's visual width")
    need = Vocab(t.K, t.V_a).size
    if m.vocab < need:
        raise ConfigurationError(f"model.vocab={m.vocab} is below the task vocabulary size {need}")
    if m.kind == ENCODER_CLASSIFIER:
        if t.name != QA:
            raise ConfigurationError("the encoder classifier only runs the qa task")
        if m.n_classes != t.V_a:
            raise ConfigurationError(f"model.n_classes={m.n_classes} must equal task.V_a={t.V_a}")
    elif t.name == "multitask" and m.kind != ENCDEC_MULTITASK:
        raise ConfigurationError("the multitask task needs model.kind = encdec_multitask")
    if m.max_len < t.K + 3:
        raise ConfigurationError(f"model.max_len={m.max_len} is too short for K={t.K} targets")
    tr = cfg.train
    if tr.steps < 0 or tr.batch_size < 1 or tr.lr < 0 or not 0 <= tr.warmup_frac <= 1 or tr.log_every < 1:
        raise ConfigurationError("train section has an out-of-range value (steps, batch_size, lr, warmup_frac "
                                 "or log_every)")


def parse_override(text: str) -> tuple[str, str, Any]:
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} must look like section.key=value")
    path, _, raw = text.partition("=")
    if path.count(".") != 1:
        raise ConfigurationError(f"override key {path!r} must be section.key")
    sec, key = path.strip().split(".")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return sec, key, value


def load_config(path: "str | Path | None" = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Read a TOML file (or start from defaults) and apply ``section.key=value`` overrides."""
    data: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as e:
            raise ConfigurationError(f"cannot read config {path}: {e.strerror}") from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigurationError(f"{path}: {e}") from e
    data = copy.deepcopy(data)
    for text in overrides:
        sec, key, value = parse_override(text)
        table = data.setdefault(sec, {})
        if not isinstance(table, dict):
            raise ConfigurationError(f"[{sec}] must be a table")
        table[key] = value
    return from_dict(data)
