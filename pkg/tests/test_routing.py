import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vlroute.errors import ConfigurationError, DimensionError, PreconditionError
from vlroute.routing import (
    LINEAR_KINDS,
    BottleneckPair,
    RoutingKind,
    dispatch,
    prepare_xv,
    route_eltwise_add,
    route_eltwise_mul,
    route_proj_mul,
    route_relu_proj,
    route_rescale_mul,
)
from vlroute.tensor import Tensor, finite_diff_grad, max_rel_error, mean_rows, mul, sum_all

el = st.floats(-4, 4, allow_nan=False, width=64)


@st.composite
def pairs(draw, nonneg=False):
    L, r = draw(st.integers(1, 6)), draw(st.integers(1, 6))
    elements = st.floats(0, 4, width=64) if nonneg else el
    x_t = draw(hnp.arrays(np.float64, (L, r), elements=elements))
    x_v = draw(hnp.arrays(np.float64, (1, r), elements=elements))
    return x_t, x_v


def T(a):
    return Tensor(a)


def test_prepare_xv_examples():
    np.testing.assert_array_equal(prepare_xv(T([[1.0, 2.0], [3.0, 4.0]])).data, [[2.0, 3.0]])
    np.testing.assert_array_equal(prepare_xv(T([[7.0, 8.0]])).data, [[7.0, 8.0]])
    with pytest.raises(PreconditionError):
        prepare_xv(T([1.0, 2.0]))


def test_prepare_xv_gradient_splits_evenly():
    feats = np.random.default_rng(0).normal(size=(4, 3))
    probe = np.random.default_rng(1).normal(size=(1, 3))

    def f(x):
        return sum_all(mul(prepare_xv(x), T(probe)))

    x = Tensor(feats, requires_grad=True)
    f(x).backward()
    num = finite_diff_grad(f, Tensor(feats)).data
    np.testing.assert_allclose(x.grad, np.broadcast_to(probe / 4, (4, 3)), atol=1e-15)
    assert max_rel_error(x.grad, num) < 1e-9


def test_eltwise_mul_examples():
    x_t = T([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(route_eltwise_mul(x_t, T([[2.0, 10.0]])).data, [[2, 20], [6, 40]])


def test_eltwise_add_example():
    x_t = T([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(route_eltwise_add(x_t, T([[10.0, 20.0]])).data, [[11, 22], [13, 24]])


def test_proj_and_rescale_examples():
    x_t = T([[1.0, 2.0], [3.0, 4.0]])
    x_v = T([[1.0, 1.0]])
    # x_t x_v^T = [3, 7]; times x_v
    np.testing.assert_array_equal(route_proj_mul(x_t, x_v).data, [[3, 3], [7, 7]])
    # row sums times x_v; with x_v = ones the two coincide
    np.testing.assert_array_equal(route_rescale_mul(x_t, x_v).data, [[3, 3], [7, 7]])
    np.testing.assert_array_equal(route_rescale_mul(x_t, T([[2.0, -1.0]])).data, [[6, -3], [14, -7]])


@given(pairs())
def test_identity_and_annihilator(p):
    x_t, x_v = p
    ones, zeros = np.ones_like(x_v), np.zeros_like(x_v)
    np.testing.assert_array_equal(route_eltwise_mul(T(x_t), T(ones)).data, x_t)
    np.testing.assert_array_equal(route_eltwise_mul(T(x_t), T(zeros)).data, 0 * x_t)
    np.testing.assert_array_equal(route_eltwise_add(T(x_t), T(zeros)).data, x_t)
    for fn in (route_proj_mul, route_rescale_mul):
        assert not np.any(fn(T(x_t), T(zeros)).data)
    t = T(x_t)
    assert dispatch("none", t, T(x_v)) is t


def _max_2x2_minor(m):
    best = 0.0
    for i in range(m.shape[0]):
        for j in range(i + 1, m.shape[0]):
            for k in range(m.shape[1]):
                for l in range(k + 1, m.shape[1]):
                    best = max(best, abs(m[i, k] * m[j, l] - m[i, l] * m[j, k]))
    return best


@given(pairs())
def test_proj_and_rescale_outputs_have_rank_at_most_one(p):
    x_t, x_v = p
    for fn in (route_proj_mul, route_rescale_mul):
        out = fn(T(x_t), T(x_v)).data
        scale = max(1.0, np.abs(out).max()) ** 2
        assert _max_2x2_minor(out) / scale < 1e-10


@given(pairs(), st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
def test_linear_in_x_t(p, seed, a, b):
    x_t, x_v = p
    y_t = np.random.default_rng(seed).normal(size=x_t.shape)
    for kind in (RoutingKind.ELTWISE_MUL, RoutingKind.PROJ_MUL, RoutingKind.RESCALE_MUL):
        lhs = dispatch(kind, T(a * x_t + b * y_t), T(x_v)).data
        rhs = a * dispatch(kind, T(x_t), T(x_v)).data + b * dispatch(kind, T(y_t), T(x_v)).data
        scale = max(1.0, np.abs(lhs).max(), np.abs(rhs).max())
        assert np.abs(lhs - rhs).max() / scale < 1e-12
    # add is affine: the x_v offset enters once
    lhs = route_eltwise_add(T(a * x_t + b * y_t), T(x_v)).data
    rhs = a * x_t + b * y_t + x_v
    assert np.abs(lhs - rhs).max() < 1e-12


@given(pairs(), st.floats(-5, 5))
def test_proj_scales_with_c_squared(p, c):
    x_t, x_v = p
    lhs = route_proj_mul(T(x_t), T(c * x_v)).data
    rhs = c * c * route_proj_mul(T(x_t), T(x_v)).data
    scale = max(1.0, np.abs(rhs).max())
    assert np.abs(lhs - rhs).max() / scale < 1e-12


@given(pairs(nonneg=True))
def test_relu_variant_equals_proj_on_nonnegative_inputs(p):
    x_t, x_v = p
    np.testing.assert_array_equal(route_relu_proj(T(x_t), T(x_v)).data, route_proj_mul(T(x_t), T(x_v)).data)


def test_relu_variant_differs_on_negative_inputs():
    x_t, x_v = T([[-1.0, 2.0]]), T([[1.0, 1.0]])
    assert not np.array_equal(route_relu_proj(x_t, x_v).data, route_proj_mul(x_t, x_v).data)


def test_multirow_proj_is_plain_product():
    rng = np.random.default_rng(3)
    x_t, x_v = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    np.testing.assert_allclose(route_proj_mul(T(x_t), T(x_v)).data, x_t @ x_v.T @ x_v, atol=1e-14)
    with pytest.raises(PreconditionError):
        route_eltwise_mul(T(x_t), T(x_v))


def test_pair_validation():
    with pytest.raises(DimensionError):
        BottleneckPair(T(np.ones((2, 3))), T(np.ones((1, 4))))
    with pytest.raises(PreconditionError):
        BottleneckPair(T(np.ones((2, 3))), T(np.ones((2, 3))))
    BottleneckPair(T(np.ones((2, 3))), T(np.ones((2, 3))), multirow=True)


def test_batched_routing_matches_per_sample():
    rng = np.random.default_rng(4)
    x_t, x_v = rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 1, 4))
    for kind in LINEAR_KINDS:
        batched = dispatch(kind, T(x_t), T(x_v)).data
        for b in range(3):
            np.testing.assert_allclose(batched[b], dispatch(kind, T(x_t[b]), T(x_v[b])).data, atol=1e-14)


def test_kind_parsing():
    assert RoutingKind.parse("proj") is RoutingKind.PROJ_MUL
    with pytest.raises(ConfigurationError, match="valid strings"):
        RoutingKind.parse("projection")
    with pytest.raises(ConfigurationError):
        dispatch("cross_attn", T([[1.0]]), T([[1.0]]))
