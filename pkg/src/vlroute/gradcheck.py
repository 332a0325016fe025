"""Finite-difference gradient suite: primitive ops, routing kinds, PEFT units, whole models.

Every case compares tape gradients with central differences (64-bit,
eps=1e-5). The reported error of a case is :func:`max_rel_error` over all
checked arrays taken together: the largest coordinate error divided by the
largest gradient magnitude in the case. The worst single-array value is kept
as a diagnostic; it is noisy for arrays whose whole gradient sits near the
finite-difference roundoff floor (about 1e-16 * loss / eps).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .models import ModelConfig, build_model
from .peft import PeftConfig, PeftUnit, inject
from .routing import RoutingKind, dispatch
from .tasks import AttributeWorld, gen_caption, gen_multitask, gen_qa
from .tensor import Graph, Tensor, no_grad

EPS = 1e-5
TOLERANCE = 1e-6


@dataclass
class GradResult:
    name: str
    max_rel_err: float
    worst_array_err: float
    n_values: int
    seconds: float

    def ok(self, tol: float = TOLERANCE) -> bool:
        return self.max_rel_err < tol


def check_leaves(loss_fn: Callable[[], Tensor], leaves: list[Tensor],
                 eps: float = EPS) -> tuple[float, float, int]:
    """(joint max relative error, worst per-array error, value count) for scalar ``loss_fn()``.

    Perturbs leaf data in place and restores it.
    """
    for p in leaves:
        p.grad = None
    with Graph() as g:
        loss = loss_fn()
        g.backward(loss)
    worst, count = 0.0, 0
    all_a, all_n = [], []
    for p in leaves:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        numeric = np.zeros(p.shape)
        flat, nflat = p.data.reshape(-1), numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + eps
                fp = loss_fn().item()
                flat[i] = keep - eps
                fm = loss_fn().item()
                flat[i] = keep
                nflat[i] = (fp - fm) / (2 * eps)
        worst = max(worst, T.max_rel_error(analytic, numeric))
        all_a.append(analytic.ravel())
        all_n.append(numeric.ravel())
        count += p.size
        p.grad = None
    joint = T.max_rel_error(np.concatenate(all_a), np.concatenate(all_n))
    return joint, worst, count


def _leaf(rng, *shape, positive=False) -> Tensor:
    a = rng.normal(size=shape)
    return Tensor(np.abs(a) + 0.1 if positive else a, requires_grad=True)


def _probe(rng, out_shape) -> np.ndarray:
    return rng.normal(size=out_shape)


def _dot(out: Tensor, probe: np.ndarray) -> Tensor:
    """Scalar <out, probe>, so every output coordinate contributes."""
    return T.sum_all(T.mul(out, Tensor(probe)))


def _op_case(fn, *leaf_shapes, seed=0, positive=False):
    def run():
        rng = np.random.default_rng(seed)
        leaves = [_leaf(rng, *s, positive=positive) for s in leaf_shapes]
        with no_grad():
            shape = fn(*leaves).shape
        probe = _probe(rng, shape)
        return check_leaves(lambda: _dot(fn(*leaves), probe), leaves)
    return run


def _op_cases() -> Iterator[tuple[str, Callable]]:
    tgt = np.array([[1, 0, 3], [2, 2, 0]])
    yield "op/add", _op_case(T.add, (2, 3, 4), (2, 3, 4))
    yield "op/sub", _op_case(T.sub, (2, 3, 4), (2, 3, 4))
    yield "op/mul", _op_case(T.mul, (2, 3, 4), (2, 3, 4))
    yield "op/scale", _op_case(lambda a: T.scale(a, -1.7), (3, 4))
    yield "op/matmul", _op_case(T.matmul, (3, 4), (4, 5))
    yield "op/matmul_batched", _op_case(T.matmul, (2, 3, 4), (2, 4, 5))
    yield "op/matmul_shared_rhs", _op_case(T.matmul, (2, 3, 4), (4, 5))
    yield "op/transpose", _op_case(T.transpose, (2, 3, 4))
    yield "op/broadcast_rows", _op_case(lambda v: T.broadcast_rows(v, 5), (2, 1, 4))
    yield "op/linear", _op_case(T.linear, (2, 3, 4), (5, 4), (5,))
    yield "op/relu", _op_case(T.relu, (3, 6))
    yield "op/gelu", _op_case(T.gelu, (3, 6))
    yield "op/softmax_rows", _op_case(T.softmax_rows, (2, 3, 5))
    yield "op/softmax_rows_causal", _op_case(lambda x: T.softmax_rows(x, np.triu(np.ones((4, 4), bool), 1)),
                                             (2, 4, 4))
    yield "op/mean_rows", _op_case(T.mean_rows, (2, 5, 3))
    yield "op/sum_all", _op_case(T.sum_all, (2, 3))
    yield "op/frobenius_norm", _op_case(T.frobenius_norm, (3, 4))
    yield "op/reshape", _op_case(lambda x: T.reshape(x, (4, 6)), (2, 3, 4))
    yield "op/permute", _op_case(lambda x: T.permute(x, (1, 0, 2)), (2, 3, 4))
    yield "op/concat", _op_case(lambda a, b: T.concat([a, b], axis=1), (2, 1, 4), (2, 3, 4))
    yield "op/index", _op_case(lambda x: x[:, 1:, ::2], (2, 3, 4))
    yield "op/layer_norm", _op_case(T.layer_norm, (2, 3, 6), (6,), (6,))
    yield "op/embedding", _op_case(lambda t: T.embedding(t, np.array([[0, 3, 3], [1, 0, 2]])), (4, 5))
    yield "op/cross_entropy", _op_case(lambda z: T.cross_entropy(z, tgt, ignore_index=3), (2, 3, 5))


def _routing_case(kind: RoutingKind, rows_v: int = 1):
    def run():
        rng = np.random.default_rng(hash(kind.value) % 2**32 + rows_v)
        x_t = _leaf(rng, 2, 5, 4)
        x_v = _leaf(rng, 2, rows_v, 4)
        with no_grad():
            shape = dispatch(kind, x_t, x_v).shape
        probe = _probe(rng, shape)
        return check_leaves(lambda: _dot(dispatch(kind, x_t, x_v), probe), [x_t, x_v])
    return run


def _routing_cases():
    for kind in RoutingKind:
        if kind in (RoutingKind.NONE, RoutingKind.CROSS_ATTN):
            continue
        yield f"routing/{kind.value}", _routing_case(kind)
    yield "routing/proj_multirow", _routing_case(RoutingKind.PROJ_MUL, rows_v=3)
    yield "routing/relu_proj_multirow", _routing_case(RoutingKind.RELU_PROJ_MUL, rows_v=3)


def _randomize_params(params: list[Tensor], rng, std: float = 0.3) -> None:
    """Redraw trainable arrays at O(1) scale.

    Zero-initialised up maps and heads would hide every upstream gradient, and
    the small adapter init makes cubic routing paths (proj) produce gradients
    near the finite-difference roundoff floor.
    """
    for p in params:
        p.data[...] = rng.normal(0.0, std, p.shape)


def _unit_case(kind: str, routing: RoutingKind, chain: str = "standard", share_down: bool = True,
               pool: bool = True, rows_r: int = 1):
    def run():
        rng = np.random.default_rng(17)
        d, r = 6, 4
        unit = PeftUnit(kind, d, d, r, rng, routing=routing, chain=chain, share_down=share_down, pool=pool,
                        bias=True)
        params = [p for _, p in unit.named_parameters()]
        _randomize_params(params, rng)
        base = T.Tensor(rng.normal(size=(d, d)) / np.sqrt(d))
        x_H = _leaf(rng, 2, 3, d)
        x_R = _leaf(rng, 2, rows_r, d)
        if kind == "lora":
            def f():
                return unit.lora_forward(lambda x: T.linear(x, base), x_H, x_R if routing.value != "none" else None)
        else:
            def f():
                return unit.adapter_forward(x_H, x_R if routing.value != "none" else None)
        with no_grad():
            shape = f().shape
        probe = _probe(rng, shape)
        leaves = params + [x_H] + ([x_R] if routing is not RoutingKind.NONE else [])
        return check_leaves(lambda: _dot(f(), probe), leaves)
    return run


def _unit_cases():
    for kind in ("lora", "adapter"):
        for routing in RoutingKind:
            yield f"unit/{kind}/{routing.value}", _unit_case(kind, routing)
        yield f"unit/{kind}/proj_separate_down", _unit_case(kind, RoutingKind.PROJ_MUL, share_down=False)
        yield f"unit/{kind}/proj_unpooled", _unit_case(kind, RoutingKind.PROJ_MUL, pool=False, rows_r=3)
        yield f"unit/{kind}/cross_attn_grid", _unit_case(kind, RoutingKind.CROSS_ATTN, rows_r=3)
        yield f"unit/{kind}/cross_attn_quarter", _unit_case(kind, RoutingKind.CROSS_ATTN, chain="quarter", rows_r=3)


def _model_case(model_kind: str, peft: PeftConfig, comparator: bool = False):
    def run():
        world = AttributeWorld(K=2, V_a=2, d_v=8, noise_sigma=0.1, seed=3)
        if model_kind == "encoder_classifier":
            samples = gen_qa(world, 4, seed=1).samples[:2]
        elif model_kind == "decoder_generator":
            samples = gen_caption(world, 4, seed=1).samples[:2]
        else:
            samples = gen_multitask(world, 4, seed=1).by_task("caption")[:2]
        model = build_model(ModelConfig(kind=model_kind, d=8, heads=2, blocks=2, decoder_blocks=2, vocab=16,
                                        max_len=8, n_classes=2, head_hidden=6, ffn_mult=2, comparator=comparator,
                                        seed=5))
        inject(model, peft)
        rng = np.random.default_rng(23)
        params = [p for _, p in model.trainable_parameters()]
        _randomize_params(params, rng)
        batch = model.collate(samples)
        return check_leaves(lambda: model.loss(batch), params)
    return run


def _model_cases():
    yield "model/encoder_classifier/lora_proj", _model_case(
        "encoder_classifier", PeftConfig(kind="lora", r=2, routing="proj"))
    yield "model/encoder_classifier/adapter_mul", _model_case(
        "encoder_classifier", PeftConfig(kind="adapter", r=2, routing="mul"))
    yield "model/decoder_generator/lora_rescale", _model_case(
        "decoder_generator", PeftConfig(kind="lora", r=2, routing="rescale"))
    yield "model/decoder_generator/adapter_add", _model_case(
        "decoder_generator", PeftConfig(kind="adapter", r=2, routing="add"))
    yield "model/decoder_generator/comparator_cross_attn", _model_case(
        "decoder_generator", PeftConfig(kind="lora", r=4, routing="cross_attn"), comparator=True)
    yield "model/encdec_multitask/lora_relu_proj", _model_case(
        "encdec_multitask", PeftConfig(kind="lora", r=2, routing="relu_proj"))
    yield "model/encdec_multitask/adapter_per_task", _model_case(
        "encdec_multitask", PeftConfig(kind="adapter", r=2, routing={"qa": "mul", "caption": "proj"},
                                       tasks=("qa", "caption")))


def cases() -> list[tuple[str, Callable[[], tuple[float, float, int]]]]:
    return [*_op_cases(), *_routing_cases(), *_unit_cases(), *_model_cases()]


def run_suite(select: str | None = None) -> list[GradResult]:
    """Run every case (or those whose name contains ``select``)."""
    out = []
    for name, fn in cases():
        if select and select not in name:
            continue
        t0 = time.perf_counter()
        err, worst, n = fn()
        out.append(GradResult(name, err, worst, n, time.perf_counter() - t0))
    return out


def format_results(results: list[GradResult], tol: float = TOLERANCE) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name.ljust(width)}  {r.max_rel_err:.3e}  (array {r.worst_array_err:.1e})  n={r.n_values:<5d} "
             f"{'ok' if r.ok(tol) else 'FAIL'}" for r in results]
    worst = max(r.max_rel_err for r in results)
    lines.append(f"{len(results)} cases, worst max_rel_err {worst:.3e} (tolerance {tol:g})")
    return "\n".join(lines)


