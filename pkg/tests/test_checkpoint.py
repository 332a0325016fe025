import numpy as np
import pytest

from conftest import tiny_model_cfg
from vlroute import checkpoint
from vlroute.errors import CheckpointError
from vlroute.models import build_model
from vlroute.peft import PeftConfig, inject


def _model(**kw):
    return inject(build_model(tiny_model_cfg()), PeftConfig(kind="lora", r=2, **kw))


def test_round_trip_is_bit_exact(tmp_path):
    m = _model(routing="proj")
    for _, p in m.trainable_parameters():
        p.data[...] = np.random.default_rng(0).normal(size=p.shape)
    blob = checkpoint.save(m, tmp_path / "a.ckpt", seed=3, step=7)
    other = _model(routing="proj")
    ck = checkpoint.load(other, tmp_path / "a.ckpt")
    assert ck.seed == 3 and ck.step == 7
    for (n, a), (_, b) in zip(m.named_parameters(), other.named_parameters()):
        assert np.array_equal(a.data, b.data), n
    assert checkpoint.to_bytes(other, seed=3, step=7) == blob


def test_signature_mismatch_is_rejected():
    blob = checkpoint.to_bytes(_model())
    with pytest.raises(CheckpointError, match="signature"):
        checkpoint.load(build_model(tiny_model_cfg()), blob)


@pytest.mark.parametrize("mutate,match", [
    (lambda b: b"X" + b[1:], "magic"),
    (lambda b: b[:-3], "trailing|truncated"),
    (lambda b: b + b"\0", "trailing"),
    (lambda b: b.replace(b"seed", b"sead", 1), "seed"),
])
def test_corrupt_archives(mutate, match):
    with pytest.raises(CheckpointError, match=match):
        checkpoint.parse(mutate(checkpoint.to_bytes(_model())))
