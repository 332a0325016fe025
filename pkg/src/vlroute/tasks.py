"""Deterministic synthetic vision-language tasks.

An :class:`AttributeWorld` has ``K`` attributes with ``V_a`` values each and a
fixed random embedding per (attribute, value). A sample's visual vector is the
sum of its chosen value embeddings plus Gaussian noise, so answering a
question about attribute ``k`` requires reading the visual vector *through*
the question.

Token layout (see :class:`Vocab`)::

    0 PAD | 1 BOS | 2 EOS | 3 <qa> | 4 <cap> | 5.. question tokens (K) | value tokens (K * V_a)
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, PreconditionError

QA = "qa"
CAPTION = "caption"
TASK_PROMPTS = {QA: 3, CAPTION: 4}


@dataclass(frozen=True)
class Vocab:
    K: int
    V_a: int

    PAD = 0
    BOS = 1
    EOS = 2

    def prompt(self, task: str) -> int:
        return TASK_PROMPTS[task]

    def question(self, k: int) -> int:
        return 5 + k

    def value(self, k: int, a: int) -> int:
        return 5 + self.K + k * self.V_a + a

    @property
    def size(self) -> int:
        return 5 + self.K + self.K * self.V_a

    def name(self, token: int) -> str:
        if token < 5:
            return ["PAD", "BOS", "EOS", "<qa>", "<cap>"][token]
        if token < 5 + self.K:
            return f"Q{token - 5}"
        off = token - 5 - self.K
        return f"A{off // self.V_a}={off % self.V_a}"


class AttributeWorld:
    """Fixed attribute embeddings, regenerable bit-exactly from ``seed``."""

    def __init__(self, K: int = 4, V_a: int = 4, d_v: int = 32, noise_sigma: float = 0.1, seed: int = 0):
        if K < 1 or V_a < 2 or d_v < 1:
            raise ConfigurationError(f"invalid world dims K={K}, V_a={V_a}, d_v={d_v}")
        self.K = K
        self.V_a = V_a
        self.d_v = d_v
        self.noise_sigma = float(noise_sigma)
        self.seed = seed
        rng = np.random.default_rng([seed, 0x5EED])
        self.embed = rng.normal(0.0, 1.0 / np.sqrt(d_v), (K * V_a, d_v))
        self.vocab = Vocab(K, V_a)

    def row(self, k: int, a: int) -> np.ndarray:
        return self.embed[k * self.V_a + a]

    def render(self, latents: Sequence[int]) -> np.ndarray:
        """Noise-free visual vector for a latent assignment."""
        return sum(self.row(k, a) for k, a in enumerate(latents))

    def render_grid(self, latents: Sequence[int]) -> np.ndarray:
        return np.stack([self.row(k, a) for k, a in enumerate(latents)])


@dataclass
class Sample:
    """One example.

    ``tokens`` are the textual input ids (question or prompt), ``target`` the
    generative answer ending in EOS, ``label`` the class id for QA (the value
    index of the asked attribute; -1 for captions). ``routing_feature`` is set
    only by ablation and then replaces the routing stream.
    """

    index: int
    task: str
    tokens: np.ndarray
    visual: np.ndarray
    grid: np.ndarray
    label: int
    target: np.ndarray
    latents: tuple[int, ...]
    routing_feature: np.ndarray | None = None


def _is_val(index: int) -> bool:
    h = hashlib.sha256(str(index).encode()).digest()
    return h[0] % 10 == 0


@dataclass
class Dataset:
    samples: list[Sample]
    world: AttributeWorld | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def train(self) -> list[Sample]:
        return [s for s in self.samples if not _is_val(s.index)]

    @property
    def val(self) -> list[Sample]:
        return [s for s in self.samples if _is_val(s.index)]

    def by_task(self, task: str) -> list[Sample]:
        return [s for s in self.samples if s.task == task]

    @property
    def tasks(self) -> list[str]:
        return sorted({s.task for s in self.samples})


def _noise(rng: np.random.Generator, sigma: float, shape) -> np.ndarray:
    z = rng.normal(0.0, 1.0, shape)
    return z * sigma


def _draw(world: AttributeWorld, rng: np.random.Generator):
    latents = tuple(int(a) for a in rng.integers(0, world.V_a, size=world.K))
    visual = world.render(latents) + _noise(rng, world.noise_sigma, world.d_v)
    grid = world.render_grid(latents) + _noise(rng, world.noise_sigma, (world.K, world.d_v))
    return latents, visual, grid


def gen_qa(world: AttributeWorld, n: int, seed: int = 0, *, prompt: bool = False, start: int = 0) -> Dataset:
    """QA samples: the question token names one attribute, the label is its value."""
    if n < 1:
        raise PreconditionError(f"n must be >= 1, got {n}")
    vocab = world.vocab
    rng = np.random.default_rng([world.seed, seed, 1])
    samples = []
    for i in range(n):
        latents, visual, grid = _draw(world, rng)
        k = int(rng.integers(0, world.K))
        a = latents[k]
        toks = [vocab.question(k)]
        if prompt:
            toks = [vocab.prompt(QA)] + toks
        samples.append(Sample(
            index=start + i, task=QA, tokens=np.array(toks, dtype=np.int64), visual=visual, grid=grid,
            label=a, target=np.array([vocab.value(k, a), vocab.EOS], dtype=np.int64), latents=latents,
        ))
    return Dataset(samples, world, {"kind": "qa", "n": n, "seed": seed})


def caption_target(world: AttributeWorld, latents: Sequence[int], order: Sequence[int] | None = None) -> np.ndarray:
    order = range(world.K) if order is None else order
    return np.array([world.vocab.value(k, latents[k]) for k in order] + [world.vocab.EOS], dtype=np.int64)


def gen_caption(world: AttributeWorld, n: int, seed: int = 0, *, order: Sequence[int] | None = None,
                prompt: bool = False, start: int = 0) -> Dataset:
    """Caption samples: the target lists every attribute's value token then EOS."""
    if n < 1:
        raise PreconditionError(f"n must be >= 1, got {n}")
    if order is not None and sorted(order) != list(range(world.K)):
        raise ConfigurationError(f"attribute order {order} is not a permutation of range({world.K})")
    vocab = world.vocab
    rng = np.random.default_rng([world.seed, seed, 2])
    samples = []
    for i in range(n):
        latents, visual, grid = _draw(world, rng)
        toks = [vocab.prompt(CAPTION)] if prompt else []
        samples.append(Sample(
            index=start + i, task=CAPTION, tokens=np.array(toks, dtype=np.int64), visual=visual, grid=grid,
            label=-1, target=caption_target(world, latents, order), latents=latents,
        ))
    return Dataset(samples, world, {"kind": "caption", "n": n, "seed": seed})


def gen_multitask(world: AttributeWorld, n: int, seed: int = 0) -> Dataset:
    """QA and caption samples, each prefixed with its task-prompt token, seed-shuffled."""
    if n < 1:
        raise PreconditionError(f"n must be >= 1, got {n}")
    n_qa = (n + 1) // 2
    parts = gen_qa(world, n_qa, seed, prompt=True).samples
    if n - n_qa:
        parts += gen_caption(world, n - n_qa, seed, prompt=True, start=n_qa).samples
    order = np.random.default_rng([world.seed, seed, 3]).permutation(len(parts))
    return Dataset([parts[i] for i in order], world, {"kind": "multitask", "n": n, "seed": seed})


def task_batches(samples: Sequence[Sample], batch_size: int, rng: np.random.Generator | None = None,
                 *, by_task: bool = True) -> Iterator[list[Sample]]:
    """Yield batches; with ``by_task`` each batch holds a single task, tasks interleaved."""
    idx = np.arange(len(samples)) if rng is None else rng.permutation(len(samples))
    if not by_task:
        for s in range(0, len(idx), batch_size):
            yield [samples[i] for i in idx[s:s + batch_size]]
        return
    queues: dict[str, list[Sample]] = {}
    for i in idx:
        queues.setdefault(samples[i].task, []).append(samples[i])
    iters = {t: [q[s:s + batch_size] for s in range(0, len(q), batch_size)] for t, q in sorted(queues.items())}
    for group in itertools.zip_longest(*iters.values()):
        for batch in group:
            if batch:
                yield batch


ABLATION_MODES = ("noise", "ones")
ABLATION_SCOPES = ("xr", "both")


def ablate_visual(dataset: Dataset, mode: str, *, scope: str = "xr", seed: int = 0) -> Dataset:
    """Replace the routing feature with noise or ones.

    ``scope="xr"`` keeps the prepended visual token and replaces only the
    routing stream; ``scope="both"`` replaces the visual vector and grid too.
    Labels and targets are never touched.
    """
    if mode not in ABLATION_MODES:
        raise ConfigurationError(f"unknown ablation mode {mode!r}; expected 'noise' or 'ones'")
    if scope not in ABLATION_SCOPES:
        raise ConfigurationError(f"unknown ablation scope {scope!r}; expected 'xr' or 'both'")
    out = []
    for s in dataset.samples:
        d = s.visual.shape[0]
        if mode == "ones":
            feat = np.ones(d)
        else:
            feat = np.random.default_rng([seed, s.index, 0xAB1A]).normal(0.0, 1.0, d)
        if scope == "xr":
            out.append(replace(s, routing_feature=feat))
        else:
            grid = np.broadcast_to(feat, s.grid.shape).copy()
            out.append(replace(s, visual=feat, grid=grid, routing_feature=None))
    meta = dict(dataset.meta, ablation=mode, ablation_scope=scope, ablation_seed=seed)
    return Dataset(out, dataset.world, meta)


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def qa_oracle_predict(world: AttributeWorld, visual: np.ndarray, k: int) -> int:
    """Bayes-optimal answer by enumerating every latent assignment.

    Under isotropic Gaussian noise the posterior over assignments is
    proportional to exp(-||v - render(latents)||^2 / 2 sigma^2); the answer
    maximises the marginal posterior of attribute ``k``. With sigma == 0 this
    reduces to the nearest noise-free rendering.
    """
    combos, means = _all_renders(world)
    d2 = ((means - visual) ** 2).sum(axis=1)
    if world.noise_sigma == 0.0:
        return int(combos[int(np.argmin(d2)), k])
    logp = -d2 / (2.0 * world.noise_sigma**2)
    logp -= logp.max()
    p = np.exp(logp)
    marg = np.bincount(combos[:, k], weights=p, minlength=world.V_a)
    return int(np.argmax(marg))


_RENDER_CACHE: dict = {}


def _all_renders(world: AttributeWorld):
    key = (world.K, world.V_a, world.d_v, world.seed)
    if key not in _RENDER_CACHE:
        combos = np.array(list(itertools.product(range(world.V_a), repeat=world.K)), dtype=np.int64)
        means = np.stack([world.render(c) for c in combos])
        _RENDER_CACHE[key] = (combos, means)
    return _RENDER_CACHE[key]


def qa_oracle_accuracy(world: AttributeWorld, samples: Sequence[Sample]) -> float:
    vocab = world.vocab
    hits = 0
    for s in samples:
        k = int(s.tokens[-1]) - vocab.question(0)
        hits += qa_oracle_predict(world, s.visual, k) == s.label
    return hits / len(samples)


def replay_label(world: AttributeWorld, sample: Sample) -> int:
    """Recompute the QA label from the stored latents and question."""
    k = int(sample.tokens[-1]) - world.vocab.question(0)
    return sample.latents[k]


# ---------------------------------------------------------------------------
# dump format: one JSON object per line, keys in this order
# ---------------------------------------------------------------------------

DUMP_FIELDS = ("task", "index", "tokens", "visual", "label", "target", "latents", "routing_feature")


def dump_jsonl(dataset: Dataset, path: "str | Path") -> None:
    with open(path, "w") as fh:
        for s in dataset.samples:
            rec = {
                "task": s.task,
                "index": s.index,
                "tokens": s.tokens.tolist(),
                "visual": [float(v) for v in s.visual],
                "label": s.label,
                "target": s.target.tolist(),
                "latents": list(s.latents),
                "routing_feature": None if s.routing_feature is None else [float(v) for v in s.routing_feature],
            }
            fh.write(json.dumps(rec) + "\n")


def load_jsonl(path: "str | Path", world: AttributeWorld | None = None) -> Dataset:
    """Read a dump. The per-attribute grid is not stored and is rebuilt from ``world`` when given."""
    samples = []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            visual = np.array(rec["visual"], dtype=np.float64)
            grid = world.render_grid(rec["latents"]) if world is not None else visual[None, :]
            rf = rec["routing_feature"]
            samples.append(Sample(
                index=rec["index"], task=rec["task"], tokens=np.array(rec["tokens"], dtype=np.int64),
                visual=visual, grid=grid, label=rec["label"], target=np.array(rec["target"], dtype=np.int64),
                latents=tuple(rec["latents"]), routing_feature=None if rf is None else np.array(rf),
            ))
    return Dataset(samples, world)
