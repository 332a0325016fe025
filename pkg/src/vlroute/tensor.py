"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Graph` is an append-only tape. Every operation whose inputs
require gradients appends one node holding its inputs and a closure that maps
the output gradient to input gradients. ``Graph.backward`` walks the tape in
reverse append order, visiting each node once, and accumulates into the
``grad`` of every leaf with ``requires_grad=True``.

There is no implicit broadcasting: elementwise operations demand identical
shapes and :func:`broadcast_rows` is the only way to replicate a row.
Matrix operations act on the last two axes; any leading axes are batch axes
and must agree.
"""

from __future__ import annotations

import contextlib
import contextvars
import heapq
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels as K
from .errors import DimensionError, PreconditionError, RankError

_ACTIVE_GRAPH: contextvars.ContextVar["Graph | None"] = contextvars.ContextVar(
    "vlroute_active_graph", default=None
)
_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar("vlroute_grad", default=True)
_SEQ = itertools.count()


class Tensor:
    """A float64 array, optionally a node in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_graph", "_node")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if any(n == 0 for n in arr.shape):
            raise PreconditionError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._graph: Graph | None = None
        self._node: int | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._graph = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise PreconditionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key) -> "Tensor":
        return index(self, key)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("op", "out", "inputs", "backward", "seq")

    def __init__(self, op, out, inputs, backward):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.seq = next(_SEQ)


class Graph:
    """Append-only operation tape.

    Usable as a context manager to route all recorded operations into this
    instance; otherwise operations join the graph of their inputs or start a
    fresh one. When an operation combines tensors from two graphs the smaller
    tape is absorbed into the larger, ordered by creation sequence, so append
    order stays topological. A graph is single-writer.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Graph":
        self._token = _ACTIVE_GRAPH.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_GRAPH.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, out: Tensor, inputs: tuple, backward_fn: Callable) -> None:
        out._graph = self
        out._node = len(self.nodes)
        self.nodes.append(_Node(op, out, inputs, backward_fn))

    def absorb(self, other: "Graph") -> None:
        if other is self:
            return
        self.nodes = list(heapq.merge(self.nodes, other.nodes, key=lambda n: n.seq))
        for i, node in enumerate(self.nodes):
            node.out._graph = self
            node.out._node = i
        other.nodes = []

    def reset(self) -> None:
        for node in self.nodes:
            node.out._graph = None
            node.out._node = None
        self.nodes.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1 or loss.ndim != 0:
            raise PreconditionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._graph is not self:
            raise PreconditionError("loss was not produced by this graph")
        grads: dict[int, np.ndarray] = {loss._node: np.ones((), dtype=np.float64)}
        for idx in range(loss._node, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is None:
                    if t.grad is None:
                        t.grad = np.array(gi, dtype=np.float64, copy=True).reshape(t.shape)
                    else:
                        t.grad += gi
                elif t._graph is self:
                    prev = grads.get(t._node)
                    grads[t._node] = gi if prev is None else prev + gi


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every grad-requiring leaf reachable from ``loss``."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise PreconditionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._graph is None:
        raise PreconditionError("loss is not attached to a graph (no input requires grad)")
    loss._graph.backward(loss)


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


def _resolve_graph(inputs: Iterable[Tensor]) -> Graph:
    graphs: list[Graph] = []
    for t in inputs:
        if t._graph is not None and all(t._graph is not g for g in graphs):
            graphs.append(t._graph)
    active = _ACTIVE_GRAPH.get()
    if not graphs:
        return active if active is not None else Graph()
    if active is not None and all(active is not g for g in graphs):
        graphs.append(active)
    target = max(graphs, key=len) if active is None else active
    for g in graphs:
        target.absorb(g)
    return target


def _result(op: str, data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor._wrap(data)
    if _GRAD_ENABLED.get() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _resolve_graph(inputs).record(op, out, inputs, backward_fn)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def binary_elementwise(kind: str, a: Tensor, b: Tensor) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise PreconditionError(f"unknown elementwise kind {kind!r}; expected 'add' or 'mul'")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# matrix ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Product over the last two axes.

    Either both operands share identical leading (batch) axes, or ``b`` is a
    plain matrix applied to every batch element of ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise RankError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result("matmul", ad @ bd, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise RankError(f"transpose needs a matrix, got shape {a.shape}")
    return _result("transpose", np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def broadcast_rows(v: Tensor, rows: int) -> Tensor:
    """Replicate a single-row matrix ``rows`` times (``ones(rows, 1) @ v``)."""
    if v.ndim < 2:
        raise RankError(f"broadcast_rows needs a matrix, got shape {v.shape}")
    if v.shape[-2] != 1:
        raise PreconditionError(
            f"broadcast_rows needs a single row, got {v.shape[-2]} rows; pool first"
        )
    if rows < 1:
        raise PreconditionError(f"broadcast_rows needs rows >= 1, got {rows}")
    shape = v.shape[:-2] + (rows, v.shape[-1])
    out = np.broadcast_to(v.data, shape).copy()
    return _result("broadcast_rows", out, (v,), lambda g: (g.sum(axis=-2, keepdims=True),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; ``weight`` is (d_out, d_in)."""
    if weight.ndim != 2:
        raise RankError(f"linear weight must be a matrix, got shape {weight.shape}")
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input width {x.shape[-1]} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd if x.requires_grad else None
        gw = g2.T @ xd.reshape(-1, xd.shape[-1]) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result("linear", out, inputs, bw)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _result("relu", np.maximum(xd, 0.0), (x,), lambda g: (g * (xd > 0),))


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    x2 = xd.reshape(-1, xd.shape[-1]) if xd.ndim else xd.reshape(1, 1)
    out = K.gelu_fwd(np.ascontiguousarray(x2)).reshape(xd.shape)
    return _result(
        "gelu", out, (x,),
        lambda g: (K.gelu_bwd(np.ascontiguousarray(x2), np.ascontiguousarray(g.reshape(x2.shape))).reshape(xd.shape),),
    )


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is a boolean array broadcastable to ``x`` marking positions to
    exclude (filled with -inf before normalisation).
    """
    if x.ndim < 2:
        raise RankError(f"softmax_rows needs rank >= 2, got shape {x.shape}")
    xd = x.data
    if mask is not None:
        xd = np.where(mask, -np.inf, xd)
    flat = np.ascontiguousarray(xd.reshape(-1, xd.shape[-1]))
    y = K.softmax_fwd(flat)

    def bw(g):
        return (K.softmax_bwd(y, np.ascontiguousarray(g.reshape(y.shape))).reshape(x.shape),)

    return _result("softmax_rows", y.reshape(x.shape), (x,), bw)


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "softmax_rows":
        return softmax_rows(x)
    raise PreconditionError(f"unknown activation {kind!r}; expected relu, gelu or softmax_rows")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def mean_rows(x: Tensor) -> Tensor:
    """Average over the row axis (second to last), keeping it as extent 1."""
    if x.ndim < 2:
        raise RankError(f"mean_rows needs a matrix, got shape {x.shape}")
    if x.size == 0:
        raise PreconditionError("mean_rows of an empty tensor")
    n = x.shape[-2]
    return _result(
        "mean_rows",
        x.data.mean(axis=-2, keepdims=True),
        (x,),
        lambda g: (np.broadcast_to(g / n, x.shape),),
    )


def sum_all(x: Tensor) -> Tensor:
    if x.size == 0:
        raise PreconditionError("sum of an empty tensor")
    return _result("sum", np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def frobenius_norm(x: Tensor) -> Tensor:
    if x.size == 0:
        raise PreconditionError("frobenius_norm of an empty tensor")
    xd = x.data
    nrm = float(np.sqrt(np.sum(xd * xd)))

    def bw(g):
        if nrm == 0.0:
            return (np.zeros_like(xd),)
        return (g * xd / nrm,)

    return _result("frobenius_norm", np.array(nrm), (x,), bw)


def reductions(kind: str, x: Tensor) -> Tensor:
    if kind == "mean_rows":
        return mean_rows(x)
    if kind == "sum":
        return sum_all(x)
    if kind == "frobenius_norm":
        return frobenius_norm(x)
    raise PreconditionError(f"unknown reduction {kind!r}")


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} into {tuple(shape)}") from exc
    return _result("reshape", out, (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute axes {axes} invalid for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return _result("permute", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise PreconditionError("concat of nothing")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _result("concat", out, tensors, lambda g: tuple(np.split(g, splits, axis=ax)))


def _is_basic_key(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(
        p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer)) and not isinstance(p, bool)
        for p in parts
    )


def index(x: Tensor, key) -> Tensor:
    """Basic slicing; the gradient is scattered back into zeros."""
    if not _is_basic_key(key):
        raise PreconditionError(f"only basic slicing is differentiable, got key {key!r}")
    out = np.array(x.data[key], dtype=np.float64)

    def bw(g):
        full = np.zeros_like(x.data)
        full[key] += g
        return (full,)

    return _result("index", out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must be ({d},), got {gamma.shape}, {beta.shape}")
    flat = np.ascontiguousarray(x.data.reshape(-1, d))
    y, xhat, rstd = K.layernorm_fwd(flat, gamma.data, beta.data, eps)

    def bw(g):
        dx, dgamma, dbeta = K.layernorm_bwd(np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd, gamma.data)
        return dx.reshape(x.shape), dgamma, dbeta

    return _result("layer_norm", y.reshape(x.shape), (x, gamma, beta), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` (V, d) at integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    n_rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        bad = ids[(ids < 0) | (ids >= n_rows)][0]
        raise IndexError(f"token id {int(bad)} out of range for table with {n_rows} rows")
    flat = ids.reshape(-1)
    out = table.data[flat].reshape(ids.shape + (table.shape[1],))

    def bw(g):
        return (K.embedding_bwd(flat, np.ascontiguousarray(g.reshape(-1, table.shape[1])), n_rows),)

    return _result("embedding", out, (table,), bw)


def cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-softmax probability of ``targets`` (same leading shape as logits)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    V = logits.shape[-1]
    flat_t = targets.reshape(-1)
    ign = -(2**62) if ignore_index is None else int(ignore_index)
    active = flat_t[flat_t != ign]
    if active.size and (active.min() < 0 or active.max() >= V):
        raise IndexError(f"target id out of range for {V} classes")
    flat = np.ascontiguousarray(logits.data.reshape(-1, V))
    loss, dlogits, count = K.xent(flat, flat_t, ign)
    if count == 0:
        raise PreconditionError("cross_entropy: every position is ignored")
    dlogits = dlogits.reshape(logits.shape)
    return _result("cross_entropy", np.array(loss), (logits,), lambda g: (g * dlogits,))


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``; never records."""
    if eps <= 0:
        raise PreconditionError(f"eps must be positive, got {eps}")
    base = np.array(x.data, dtype=np.float64, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def value(arr):
        out = f(Tensor._wrap(arr.reshape(base.shape)))
        return out.item() if isinstance(out, Tensor) else float(out)

    with no_grad():
        for i in range(flat.size):
            pert = flat.copy()
            pert[i] = flat[i] + eps
            fp = value(pert)
            pert[i] = flat[i] - eps
            fm = value(pert)
            gflat[i] = (fp - fm) / (2.0 * eps)
    return Tensor._wrap(grad)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest coordinate error relative to the larger of the two gradients' max magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    err = np.abs(analytic - numeric).max(initial=0.0)
    if denom == 0.0:
        return float(err)
    return float(err / denom)
