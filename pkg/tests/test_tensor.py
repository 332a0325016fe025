import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vlroute.errors import DimensionError, PreconditionError, RankError
from vlroute.tensor import (
    Graph,
    Tensor,
    add,
    broadcast_rows,
    concat,
    cross_entropy,
    embedding,
    finite_diff_grad,
    frobenius_norm,
    gelu,
    layer_norm,
    linear,
    matmul,
    max_rel_error,
    mean_rows,
    mul,
    no_grad,
    permute,
    relu,
    reshape,
    softmax_rows,
    sum_all,
    transpose,
)

finite = st.floats(-3, 3, allow_nan=False, width=64)


def mats(rows=st.integers(1, 4), cols=st.integers(1, 4)):
    return st.tuples(rows, cols).flatmap(lambda s: hnp.arrays(np.float64, s, elements=finite))


def leaf(a):
    return Tensor(a, requires_grad=True)


def grad_of(fn, x):
    t = leaf(x)
    fn(t).backward()
    return t.grad


def test_tensor_is_float64_and_rejects_empty():
    assert Tensor([1, 2]).data.dtype == np.float64
    with pytest.raises(PreconditionError):
        Tensor(np.zeros((0, 3)))


def test_no_implicit_broadcasting():
    with pytest.raises(DimensionError):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones((1, 3))))
    with pytest.raises(RankError):
        matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


@given(mats(), st.floats(-2, 2))
def test_linear_ops_match_numpy(a, c):
    t = Tensor(a)
    np.testing.assert_array_equal(add(t, t).data, a + a)
    np.testing.assert_array_equal(mul(t, t).data, a * a)
    np.testing.assert_array_equal((t * c).data, a * c)
    np.testing.assert_array_equal(transpose(t).data, a.T)
    np.testing.assert_array_equal(mean_rows(t).data, a.mean(axis=0, keepdims=True))


@given(mats())
def test_sum_gradient_is_ones(a):
    np.testing.assert_array_equal(grad_of(sum_all, a), np.ones_like(a))


@given(mats())
def test_mean_rows_splits_gradient_evenly(a):
    g = grad_of(lambda t: sum_all(mean_rows(t)), a)
    np.testing.assert_allclose(g, np.full_like(a, 1.0 / a.shape[0]), rtol=0, atol=1e-15)


@given(mats())
def test_softmax_rows_sum_to_one(a):
    y = softmax_rows(Tensor(a)).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
    assert np.all(y > 0)


def test_softmax_mask_zeroes_masked_entries():
    mask = np.triu(np.ones((3, 3), dtype=bool), k=1)
    y = softmax_rows(Tensor(np.zeros((3, 3))), mask).data
    np.testing.assert_allclose(y, [[1, 0, 0], [0.5, 0.5, 0], [1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def test_relu_and_gelu_values():
    x = np.array([[-1.0, 0.0, 2.0]])
    np.testing.assert_array_equal(relu(Tensor(x)).data, [[0.0, 0.0, 2.0]])
    u = np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)
    np.testing.assert_allclose(gelu(Tensor(x)).data, 0.5 * x * (1 + np.tanh(u)), rtol=0, atol=1e-14)


@given(mats(rows=st.integers(1, 3), cols=st.integers(2, 5)))
def test_layer_norm_normalises_rows(a):
    d = a.shape[1]
    a = a + np.arange(d)  # keep rows away from zero variance
    y = layer_norm(Tensor(a), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    var = y.var(axis=-1)
    ref = a.var(axis=-1) / (a.var(axis=-1) + 1e-5)
    np.testing.assert_allclose(var, ref, rtol=1e-10)


def test_cross_entropy_uniform_logits():
    loss = cross_entropy(Tensor(np.zeros((5, 4))), np.arange(5) % 4)
    assert loss.item() == pytest.approx(np.log(4), abs=1e-15)


def test_cross_entropy_ignore_index():
    logits = np.array([[2.0, 0.0], [0.0, 5.0]])
    full = cross_entropy(Tensor(logits[:1]), [0]).item()
    masked = cross_entropy(Tensor(logits), [0, -100], ignore_index=-100).item()
    assert masked == full
    with pytest.raises(PreconditionError):
        cross_entropy(Tensor(logits), [-100, -100], ignore_index=-100)
    with pytest.raises(IndexError):
        cross_entropy(Tensor(logits), [0, 2])


def test_embedding_accumulates_repeated_ids():
    table = leaf(np.arange(6.0).reshape(3, 2))
    sum_all(embedding(table, [[0, 2, 0]])).backward()
    np.testing.assert_array_equal(table.grad, [[2, 2], [0, 0], [1, 1]])
    with pytest.raises(IndexError):
        embedding(table, [3])


def test_structural_ops_round_trip(rng):
    a = rng.normal(size=(2, 3, 4))
    t = Tensor(a)
    np.testing.assert_array_equal(permute(permute(t, (2, 0, 1)), (1, 2, 0)).data, a)
    np.testing.assert_array_equal(reshape(t, (6, 4)).data, a.reshape(6, 4))
    np.testing.assert_array_equal(concat([t, t], axis=1).data, np.concatenate([a, a], axis=1))
    np.testing.assert_array_equal(t[:, 1, :].data, a[:, 1, :])
    with pytest.raises(PreconditionError):
        t[np.array([0, 1])]


def test_broadcast_rows_requires_single_row():
    with pytest.raises(PreconditionError):
        broadcast_rows(Tensor(np.ones((2, 3))), 4)
    np.testing.assert_array_equal(broadcast_rows(Tensor([[1.0, 2.0]]), 3).data, [[1, 2]] * 3)


def test_frobenius_norm_345():
    assert frobenius_norm(Tensor([[3.0, 4.0]])).item() == 5.0


def test_gradient_accumulates_over_reused_inputs():
    x = leaf([[1.0, 2.0]])
    sum_all(add(mul(x, x), x)).backward()
    np.testing.assert_array_equal(x.grad, [[3.0, 5.0]])


def test_no_grad_records_nothing():
    x = leaf([[1.0]])
    with no_grad():
        y = mul(x, x)
    assert not y.requires_grad and y.is_leaf


def test_graphs_merge_when_combined():
    x, y = leaf([[1.0]]), leaf([[2.0]])
    a = mul(x, x)
    b = mul(y, y)
    assert a._graph is not b._graph
    out = sum_all(add(a, b))
    out.backward()
    assert x.grad[0, 0] == 2.0 and y.grad[0, 0] == 4.0


def test_graph_context_and_scalar_precondition():
    x = leaf([[1.0, 2.0]])
    with Graph() as g:
        y = mul(x, x)
    assert y._graph is g and len(g) == 1
    with pytest.raises(PreconditionError):
        g.backward(y)


@given(mats(rows=st.integers(1, 3), cols=st.integers(2, 4)), st.integers(1, 3), st.integers(0, 2**31))
def test_linear_gradient_matches_finite_differences(x, d_out, seed):
    w = np.random.default_rng(seed).normal(size=(d_out, x.shape[1]))
    probe = np.random.default_rng(seed + 1).normal(size=(x.shape[0], d_out))

    def f(xt):
        return sum_all(mul(linear(xt, Tensor(w)), Tensor(probe)))

    num = finite_diff_grad(f, Tensor(x)).data
    assert max_rel_error(grad_of(f, x), num) < 1e-8


def test_max_rel_error_definition():
    assert max_rel_error(np.array([1.0, 2.0]), np.array([1.0, 2.5])) == 0.5 / 2.5
    assert max_rel_error(np.zeros(2), np.zeros(2)) == 0.0
