import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import tiny_model_cfg
from vlroute.errors import NonFiniteLossError, ScheduleError
from vlroute.models import build_model
from vlroute.peft import PeftConfig, inject
from vlroute.tensor import Tensor
from vlroute.training import (
    AdamW,
    LinearSchedule,
    MetricsRecord,
    TrainConfig,
    evaluate,
    format_table,
    read_jsonl,
    train,
    write_jsonl,
)


def test_schedule_probes():
    s = LinearSchedule(1.0, 10, 100)
    assert s(0) == 0.0 and s(5) == 0.5 and s(10) == 1.0
    assert s(55) == pytest.approx(0.5) and s(99) == pytest.approx(1 / 90)
    with pytest.raises(ScheduleError):
        s(100)
    with pytest.raises(ScheduleError):
        LinearSchedule(1.0, 20, 10)


@given(st.floats(1e-4, 1.0), st.integers(0, 50), st.integers(1, 50))
def test_schedule_is_bounded_and_peaks_once(peak, warmup, extra):
    total = warmup + extra
    s = LinearSchedule(peak, warmup, total)
    vals = [s(t) for t in range(total)]
    assert max(vals) <= peak and min(vals) >= 0
    assert vals.index(max(vals)) == warmup


def test_adamw_matches_hand_rolled_two_steps():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=5)
    grads = [rng.normal(size=5), rng.normal(size=5)]
    sched = LinearSchedule(0.1, 0, 4)
    b1, b2, eps, wd = 0.9, 0.999, 1e-8, 0.01
    t = Tensor(p0.copy(), requires_grad=True)
    opt = AdamW([t], sched, beta1=b1, beta2=b2, eps=eps, weight_decay=wd)
    p, m, v = p0.copy(), np.zeros(5), np.zeros(5)
    for step, g in enumerate(grads):
        t.grad = g.copy()
        opt.step()
        lr = sched(step)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat, vhat = m / (1 - b1 ** (step + 1)), v / (1 - b2 ** (step + 1))
        p = p - lr * (mhat / (np.sqrt(vhat) + eps) + wd * p)
    np.testing.assert_allclose(t.data, p, rtol=0, atol=1e-12)


def test_adamw_skips_parameters_without_grad():
    a, b = Tensor(np.ones(3), requires_grad=True), Tensor(np.ones(3), requires_grad=True)
    opt = AdamW([a, b], LinearSchedule(0.1, 0, 3))
    a.grad = np.ones(3)
    opt.step()
    assert np.all(b.data == 1) and np.all(a.data < 1)
    assert opt.counts == [1, 0]


def _model():
    return inject(build_model(tiny_model_cfg()), PeftConfig(kind="lora", r=2, routing="mul"))


def test_zero_steps_leaves_model_unchanged(qa_data):
    res = train(_model(), qa_data, TrainConfig(steps=0))
    assert res.initial_checkpoint.split(b"step 0")[1] == res.final_checkpoint.split(b"step 0")[1]
    assert res.metrics == []


def test_first_loss_is_log_of_class_count(qa_data):
    res = train(_model(), qa_data, TrainConfig(steps=1, log_every=1))
    assert res.metrics[0].loss == pytest.approx(math.log(2), abs=1e-12)


def test_training_is_deterministic(qa_data):
    cfg = TrainConfig(steps=30, batch_size=8, log_every=5)
    a, b = train(_model(), qa_data, cfg, seed=4), train(_model(), qa_data, cfg, seed=4)
    assert a.final_checkpoint == b.final_checkpoint
    assert [r.to_json() for r in a.metrics] == [r.to_json() for r in b.metrics]
    c = train(_model(), qa_data, cfg, seed=5)
    assert c.final_checkpoint != a.final_checkpoint


def test_training_reduces_loss(qa_data):
    res = train(_model(), qa_data, TrainConfig(steps=150, batch_size=8, lr=1e-2, log_every=149))
    assert res.metrics[-1].loss < res.metrics[0].loss


def test_non_finite_loss_aborts(qa_data):
    model = _model()
    model.head.fc2.bias.data[...] = np.inf
    with pytest.raises(NonFiniteLossError):
        train(model, qa_data, TrainConfig(steps=2))


def test_evaluate_is_order_independent(qa_data, multitask_data):
    model = _model()
    a = evaluate(model, qa_data.samples, batch_size=5)
    b = evaluate(model, qa_data.samples[::-1], batch_size=7)
    assert [r.to_json() for r in a] == [r.to_json() for r in b]
    gen = inject(build_model(tiny_model_cfg("encdec_multitask")), PeftConfig(kind="adapter", r=2))
    recs = evaluate(gen, multitask_data.samples)
    assert [r.task for r in recs] == ["caption", "qa"]
    assert all(0 <= r.exact_match <= 1 and r.accuracy is None for r in recs)


def test_jsonl_round_trip_drops_wall_time(tmp_path):
    recs = [MetricsRecord(step=1, task="qa", loss=0.5, accuracy=1.0, lr=1e-3, n=4, wall_time=2.5)]
    write_jsonl(recs, tmp_path / "m.jsonl")
    line = (tmp_path / "m.jsonl").read_text()
    assert "wall_time" not in json.loads(line)
    assert read_jsonl(tmp_path / "m.jsonl") == recs  # wall_time is excluded from equality
    assert "wall_time" in json.loads(recs[0].to_json(timing=True))
    assert "accuracy" in format_table(recs)
