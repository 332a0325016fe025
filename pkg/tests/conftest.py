import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vlroute.models import ModelConfig
from vlroute.tasks import AttributeWorld, gen_caption, gen_multitask, gen_qa

settings.register_profile(
    "vlroute", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("vlroute")


def tiny_model_cfg(kind="encoder_classifier", **kw):
    base = dict(kind=kind, d=8, heads=2, blocks=2, decoder_blocks=2, vocab=32, max_len=12,
                n_classes=2, head_hidden=8, ffn_mult=2)
    if kind == "encdec_multitask":
        base["d_visual"] = 6
    base.update(kw)
    return ModelConfig(**base)


def tiny_world(d_v=8, **kw):
    return AttributeWorld(K=kw.pop("K", 2), V_a=kw.pop("V_a", 2), d_v=d_v, noise_sigma=kw.pop("noise_sigma", 0.1),
                          seed=kw.pop("seed", 0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def qa_data():
    return gen_qa(tiny_world(), 24, seed=0)


@pytest.fixture
def caption_data():
    return gen_caption(tiny_world(), 16, seed=0)


@pytest.fixture
def multitask_data():
    return gen_multitask(tiny_world(d_v=6), 24, seed=0)


@pytest.fixture(autouse=True)
def _isolated_out(tmp_path, monkeypatch):
    monkeypatch.setenv("VLROUTE_OUT", str(tmp_path / "runs"))


TINY_TOML = """
[model]
d = 8
heads = 2
vocab = 16
max_len = 8
n_classes = 2
head_hidden = 8
ffn_mult = 2

[peft]
kind = "lora"
r = 2
routing = "proj"

[task]
K = 2
V_a = 2
d_v = 8
n = 80

[train]
steps = 12
batch_size = 8
log_every = 4

[output]
dir = "tiny"
"""


@pytest.fixture
def tiny_toml(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML)
    return path
