import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vlroute.errors import ConfigurationError, DimensionError
from vlroute.gradcheck import check_leaves
from vlroute.nn import (
    Embedding,
    FeedForward,
    LinearMap,
    Module,
    MultiHeadAttention,
    TransformerBlock,
    causal_mask,
    param,
)
from vlroute.tensor import Tensor, mul, no_grad, sum_all


def _block_input(rng, B=2, L=3, d=8):
    return Tensor(rng.normal(size=(B, L, d)))


def test_causal_mask_shape():
    m = causal_mask(3)
    assert m.tolist() == [[False, True, True], [False, False, True], [False, False, False]]


@given(st.integers(0, 2**31), st.integers(2, 6), st.integers(0, 4))
def test_causal_block_ignores_future_tokens_exactly(seed, L, i):
    i = i % L
    rng = np.random.default_rng(seed)
    blk = TransformerBlock(8, 2, rng, causal=True)
    x = rng.normal(size=(1, L, 8))
    y = x.copy()
    y[:, i + 1:] += rng.normal(size=y[:, i + 1:].shape)
    with no_grad():
        a = blk(Tensor(x)).data
        b = blk(Tensor(y)).data
    np.testing.assert_array_equal(a[:, : i + 1], b[:, : i + 1])


def test_bidirectional_block_sees_future_tokens(rng):
    blk = TransformerBlock(8, 2, rng)
    x = rng.normal(size=(1, 3, 8))
    y = x.copy()
    y[:, 2] += 1.0
    with no_grad():
        assert not np.array_equal(blk(Tensor(x)).data[:, 0], blk(Tensor(y)).data[:, 0])


def test_zeroed_sublayers_make_block_an_identity(rng):
    blk = TransformerBlock(8, 2, rng, zero_outputs=True)
    x = rng.normal(size=(2, 3, 8))
    with no_grad():
        np.testing.assert_array_equal(blk(Tensor(x)).data, x)


def test_block_is_bit_stable_for_a_seed():
    outs = []
    for _ in range(2):
        rng = np.random.default_rng(9)
        blk = TransformerBlock(8, 2, rng, causal=True, cross=True)
        x = _block_input(rng)
        mem = _block_input(rng, L=4)
        with no_grad():
            outs.append(blk(x, memory=mem).data)
    np.testing.assert_array_equal(*outs)


@pytest.mark.parametrize("causal,cross", [(False, False), (True, False), (True, True)])
def test_full_block_gradient(causal, cross):
    rng = np.random.default_rng(5)
    blk = TransformerBlock(8, 2, rng, causal=causal, cross=cross, ffn_mult=2)
    x = Tensor(rng.normal(size=(2, 3, 8)), requires_grad=True)
    mem = Tensor(rng.normal(size=(2, 4, 8)), requires_grad=True) if cross else None
    probe = Tensor(rng.normal(size=(2, 3, 8)))
    leaves = [p for _, p in blk.named_parameters()] + [x] + ([mem] if cross else [])
    for p in leaves[:-1]:
        p.data[...] += rng.normal(0.0, 0.1, p.shape)  # move layernorm gains off 1 and biases off 0
    joint, worst, n = check_leaves(lambda: sum_all(mul(blk(x, memory=mem), probe)), leaves)
    assert joint < 1e-6
    assert n == sum(p.size for p in leaves)


def test_decoder_block_needs_memory(rng):
    blk = TransformerBlock(8, 2, rng, causal=True, cross=True)
    with pytest.raises(ConfigurationError):
        blk(_block_input(rng))


def test_attention_rejects_bad_width(rng):
    with pytest.raises(ConfigurationError):
        MultiHeadAttention(6, 4, rng)
    with pytest.raises(DimensionError):
        MultiHeadAttention(8, 2, rng)(_block_input(rng, d=4))


def test_attention_capture_rows_are_distributions(rng):
    att = MultiHeadAttention(8, 2, rng, causal=True)
    att._capture = True
    with no_grad():
        att(_block_input(rng, L=4))
    w = att._last_weights
    assert w.shape == (2, 2, 4, 4)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(w[..., np.triu_indices(4, 1)[0], np.triu_indices(4, 1)[1]] == 0)


def test_freeze_and_parameter_walk(rng):
    class Pair(Module):
        def __init__(self):
            self.a = LinearMap(3, 2, rng)
            self.items = [FeedForward(2, 4, rng)]
            self.extra = {"z": param(np.zeros(5))}

    m = Pair()
    names = [n for n, _ in m.named_parameters()]
    assert names[:2] == ["a.weight", "a.bias"]
    assert "items.0.fc1.weight" in names and "extra.z" in names
    m.freeze()
    assert m.trainable_parameters() == []
    m.unfreeze()
    assert len(m.trainable_parameters()) == len(names)


def test_embedding_positions_limit(rng):
    emb = Embedding(10, 4, rng, max_len=3)
    assert emb(np.zeros((2, 3), dtype=int)).shape == (2, 3, 4)
    with pytest.raises(DimensionError):
        emb(np.zeros((1, 4), dtype=int))
