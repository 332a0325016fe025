"""Fused numeric kernels with a numba path and a pure-numpy fallback.

Every kernel works on 2-D float64 arrays (rows x features); callers flatten
leading axes before dispatching. The numba implementations are selected at
import time unless ``VLROUTE_NO_NUMBA`` is set to a truthy value or numba is
not importable. Both implementations stay importable through
:data:`NUMPY_KERNELS` and :data:`NUMBA_KERNELS` so they can be compared.
"""

import math
import os

import numpy as np

GELU_COEF = 0.044715
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _env_disabled() -> bool:
    return os.environ.get("VLROUTE_NO_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")


try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------


def softmax_fwd_np(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd_np(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def layernorm_fwd_np(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layernorm_bwd_np(g, xhat, rstd, gamma):
    n = xhat.shape[1]
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    gx = g * gamma
    dx = (rstd[:, None] / n) * (
        n * gx - gx.sum(axis=1, keepdims=True) - xhat * (gx * xhat).sum(axis=1, keepdims=True)
    )
    return dx, dgamma, dbeta


def gelu_fwd_np(x):
    u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_bwd_np(x, g):
    u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)
    t = np.tanh(u)
    du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def xent_np(logits, targets, ignore_index):
    """Mean cross-entropy over rows whose target differs from ``ignore_index``.

    Returns ``(loss, dlogits, count)``; ``count`` is the number of scored rows.
    """
    valid = targets != ignore_index
    count = int(valid.sum())
    dlogits = np.zeros_like(logits)
    if count == 0:
        return 0.0, dlogits, 0
    rows = np.nonzero(valid)[0]
    z = logits[rows]
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    t = targets[rows]
    loss = float((lse - z[np.arange(rows.size), t]).sum() / count)
    p = np.exp(z - lse[:, None])
    p[np.arange(rows.size), t] -= 1.0
    dlogits[rows] = p / count
    return loss, dlogits, count


def embedding_bwd_np(ids, g, n_rows):
    out = np.zeros((n_rows, g.shape[1]))
    np.add.at(out, ids, g)
    return out


def adamw_update_np(p, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    """In-place decoupled-weight-decay Adam update on flat arrays."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    step = (m / bc1) / (np.sqrt(v / bc2) + eps) + weight_decay * p
    p -= lr * step


# ---------------------------------------------------------------------------
# numba implementations (same signatures, explicit loops)
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def softmax_fwd_nb(x):
        n, k = x.shape
        out = np.empty_like(x)
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, k):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(k):
                e = math.exp(x[i, j] - mx)
                out[i, j] = e
                s += e
            for j in range(k):
                out[i, j] /= s
        return out

    @njit(cache=True)
    def softmax_bwd_nb(y, g):
        n, k = y.shape
        out = np.empty_like(y)
        for i in range(n):
            dot = 0.0
            for j in range(k):
                dot += g[i, j] * y[i, j]
            for j in range(k):
                out[i, j] = y[i, j] * (g[i, j] - dot)
        return out

    @njit(cache=True)
    def layernorm_fwd_nb(x, gamma, beta, eps):
        n, k = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n)
        for i in range(n):
            mu = 0.0
            for j in range(k):
                mu += x[i, j]
            mu /= k
            var = 0.0
            for j in range(k):
                c = x[i, j] - mu
                var += c * c
            var /= k
            rs = 1.0 / math.sqrt(var + eps)
            rstd[i] = rs
            for j in range(k):
                h = (x[i, j] - mu) * rs
                xhat[i, j] = h
                y[i, j] = h * gamma[j] + beta[j]
        return y, xhat, rstd

    @njit(cache=True)
    def layernorm_bwd_nb(g, xhat, rstd, gamma):
        n, k = xhat.shape
        dx = np.empty_like(xhat)
        dgamma = np.zeros(k)
        dbeta = np.zeros(k)
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(k):
                gx = g[i, j] * gamma[j]
                s1 += gx
                s2 += gx * xhat[i, j]
                dgamma[j] += g[i, j] * xhat[i, j]
                dbeta[j] += g[i, j]
            for j in range(k):
                gx = g[i, j] * gamma[j]
                dx[i, j] = (rstd[i] / k) * (k * gx - s1 - xhat[i, j] * s2)
        return dx, dgamma, dbeta

    # 0.5 * (1 + tanh(u)) == sigmoid(2u); the exp form is several times faster
    # than numba's scalar libm tanh and agrees to a few ulp.

    @njit(cache=True, fastmath=True)
    def gelu_fwd_nb(x):
        n, k = x.shape
        out = np.empty_like(x)
        for i in range(n):
            for j in range(k):
                v = x[i, j]
                u = SQRT_2_OVER_PI * (v + GELU_COEF * v * v * v)
                out[i, j] = v / (1.0 + math.exp(-2.0 * u))
        return out

    @njit(cache=True, fastmath=True)
    def gelu_bwd_nb(x, g):
        n, k = x.shape
        out = np.empty_like(x)
        for i in range(n):
            for j in range(k):
                v = x[i, j]
                u = SQRT_2_OVER_PI * (v + GELU_COEF * v * v * v)
                sg = 1.0 / (1.0 + math.exp(-2.0 * u))
                du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * v * v)
                out[i, j] = g[i, j] * (sg + 2.0 * v * sg * (1.0 - sg) * du)
        return out

    @njit(cache=True)
    def _xent_nb(logits, targets, ignore_index):
        n, k = logits.shape
        dlogits = np.zeros_like(logits)
        count = 0
        for i in range(n):
            if targets[i] != ignore_index:
                count += 1
        if count == 0:
            return 0.0, dlogits, 0
        total = 0.0
        inv = 1.0 / count
        for i in range(n):
            t = targets[i]
            if t == ignore_index:
                continue
            mx = logits[i, 0]
            for j in range(1, k):
                if logits[i, j] > mx:
                    mx = logits[i, j]
            s = 0.0
            for j in range(k):
                e = math.exp(logits[i, j] - mx)
                dlogits[i, j] = e
                s += e
            total += math.log(s) - (logits[i, t] - mx)
            scale = inv / s
            for j in range(k):
                dlogits[i, j] *= scale
            dlogits[i, t] -= inv
        return total / count, dlogits, count

    def xent_nb(logits, targets, ignore_index):
        loss, d, count = _xent_nb(logits, targets, ignore_index)
        return float(loss), d, int(count)

    @njit(cache=True)
    def embedding_bwd_nb(ids, g, n_rows):
        k = g.shape[1]
        out = np.zeros((n_rows, k))
        for i in range(ids.shape[0]):
            row = ids[i]
            for j in range(k):
                out[row, j] += g[i, j]
        return out

    @njit(cache=True)
    def adamw_update_nb(p, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
        for i in range(p.shape[0]):
            gi = g[i]
            mi = beta1 * m[i] + (1.0 - beta1) * gi
            vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
            m[i] = mi
            v[i] = vi
            p[i] -= lr * ((mi / bc1) / (math.sqrt(vi / bc2) + eps) + weight_decay * p[i])


NUMPY_KERNELS = {
    "softmax_fwd": softmax_fwd_np,
    "softmax_bwd": softmax_bwd_np,
    "layernorm_fwd": layernorm_fwd_np,
    "layernorm_bwd": layernorm_bwd_np,
    "gelu_fwd": gelu_fwd_np,
    "gelu_bwd": gelu_bwd_np,
    "xent": xent_np,
    "embedding_bwd": embedding_bwd_np,
    "adamw_update": adamw_update_np,
}

if HAVE_NUMBA:
    NUMBA_KERNELS = {
        "softmax_fwd": softmax_fwd_nb,
        "softmax_bwd": softmax_bwd_nb,
        "layernorm_fwd": layernorm_fwd_nb,
        "layernorm_bwd": layernorm_bwd_nb,
        "gelu_fwd": gelu_fwd_nb,
        "gelu_bwd": gelu_bwd_nb,
        "xent": xent_nb,
        "embedding_bwd": embedding_bwd_nb,
        "adamw_update": adamw_update_nb,
    }
else:  # pragma: no cover
    NUMBA_KERNELS = {}

USE_NUMBA = HAVE_NUMBA and not _env_disabled()
BACKEND = "numba" if USE_NUMBA else "numpy"
_ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS

softmax_fwd = _ACTIVE["softmax_fwd"]
softmax_bwd = _ACTIVE["softmax_bwd"]
layernorm_fwd = _ACTIVE["layernorm_fwd"]
layernorm_bwd = _ACTIVE["layernorm_bwd"]
gelu_fwd = _ACTIVE["gelu_fwd"]
gelu_bwd = _ACTIVE["gelu_bwd"]
xent = _ACTIVE["xent"]
embedding_bwd = _ACTIVE["embedding_bwd"]
adamw_update = _ACTIVE["adamw_update"]
