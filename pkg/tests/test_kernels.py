import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vlroute import _kernels as K

pytestmark = pytest.mark.skipif(not K.NUMBA_KERNELS, reason="numba unavailable")

shapes = st.tuples(st.integers(1, 9), st.integers(1, 17))


def _arr(seed, shape, s=2.0):
    return np.random.default_rng(seed).normal(0.0, s, shape)


def _close(a, b, tol=1e-12):
    if isinstance(a, tuple):
        for x, y in zip(a, b):
            _close(x, y, tol)
        return
    np.testing.assert_allclose(a, b, rtol=tol, atol=tol)


@given(shapes, st.integers(0, 2**31))
def test_softmax_parity(shape, seed):
    x = _arr(seed, shape, 5.0)
    y = K.softmax_fwd_np(x)
    _close(K.softmax_fwd_nb(x), y)
    g = _arr(seed + 1, shape)
    _close(K.softmax_bwd_nb(y, g), K.softmax_bwd_np(y, g))


@given(shapes, st.integers(0, 2**31))
def test_layernorm_parity(shape, seed):
    x = _arr(seed, shape)
    gam, bet = _arr(seed + 1, shape[1]), _arr(seed + 2, shape[1])
    ref = K.layernorm_fwd_np(x, gam, bet, 1e-5)
    _close(K.layernorm_fwd_nb(x, gam, bet, 1e-5), ref)
    g = _arr(seed + 3, shape)
    _close(K.layernorm_bwd_nb(g, ref[1], ref[2], gam), K.layernorm_bwd_np(g, ref[1], ref[2], gam), 1e-11)


@given(shapes, st.integers(0, 2**31))
def test_gelu_parity(shape, seed):
    x = _arr(seed, shape, 3.0)
    g = _arr(seed + 1, shape)
    _close(K.gelu_fwd_nb(x), K.gelu_fwd_np(x))
    _close(K.gelu_bwd_nb(x, g), K.gelu_bwd_np(x, g))


@given(shapes, st.integers(0, 2**31))
def test_xent_parity(shape, seed):
    rows, v = shape
    logits = _arr(seed, shape, 4.0)
    t = np.random.default_rng(seed).integers(0, v, rows)
    t[::3] = -100
    if (t == -100).all():
        t[0] = 0
    loss_np, d_np, c_np = K.xent_np(logits, t, -100)
    loss_nb, d_nb, c_nb = K.xent_nb(logits, t, -100)
    assert c_np == c_nb
    _close(loss_nb, loss_np)
    _close(d_nb, d_np)


@given(st.integers(1, 30), st.integers(1, 6), st.integers(0, 2**31))
def test_embedding_bwd_parity(n, vocab, seed):
    ids = np.random.default_rng(seed).integers(0, vocab, n)
    g = _arr(seed, (n, 3))
    _close(K.embedding_bwd_nb(ids, g, vocab), K.embedding_bwd_np(ids, g, vocab))


@given(st.integers(1, 50), st.integers(1, 5), st.integers(0, 2**31))
def test_adamw_parity(n, t, seed):
    p, g = _arr(seed, n), _arr(seed + 1, n)
    m, v = _arr(seed + 2, n), np.abs(_arr(seed + 3, n))
    args = (1e-2, 0.9, 0.999, 1e-8, 0.01, 1 - 0.9**t, 1 - 0.999**t)
    a = [x.copy() for x in (p, g, m, v)]
    b = [x.copy() for x in (p, g, m, v)]
    K.adamw_update_np(*a, *args)
    K.adamw_update_nb(*b, *args)
    for x, y in zip(a, b):
        _close(x, y)


def test_kernel_tables_cover_the_same_names():
    assert set(K.NUMPY_KERNELS) == set(K.NUMBA_KERNELS)


@pytest.mark.parametrize("flag,expected", [("1", "numpy"), ("0", "numba")])
def test_env_flag_selects_backend(flag, expected):
    env = dict(os.environ, VLROUTE_NO_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", "from vlroute import BACKEND; print(BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected
