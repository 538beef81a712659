"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient. ``Tape.backward`` walks the record in
reverse, which is a valid reverse topological order because every node is
appended after its inputs exist.

    with Tape() as tape:
        loss = softmax_cross_entropy(x @ w, labels)
    tape.backward(loss)
    w.grad
"""

import threading

import numpy as np
from scipy.special import erf

from . import _backend
from .core import InvalidInputError

_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    # make ndarray <op> Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = None
        self.tape_node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return total(self)


def Parameter(data, name=None):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class TapeNode:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, parents, backward):
        node = TapeNode(out, parents, backward)
        out.tape_node = node
        self.nodes.append(node)

    def backward(self, loss, seed=None):
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if seed is None:
            if loss.data.size != 1:
                raise InvalidInputError("backward without a seed needs a scalar loss")
            seed = np.ones_like(loss.data)
        if not np.all(np.isfinite(loss.data)):
            raise FloatingPointError("loss is not finite")
        pending = {id(loss): np.asarray(seed, dtype=np.float64)}
        if loss.tape_node is None:
            _accumulate_leaf(loss, pending.pop(id(loss)))
            return
        for node in reversed(self.nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.tape_node is None:
                    _accumulate_leaf(parent, pg)
                elif id(parent) in pending:
                    pending[id(parent)] = pending[id(parent)] + pg
                else:
                    pending[id(parent)] = pg


def _accumulate_leaf(t, g):
    g = np.broadcast_to(g, t.shape)
    t.grad = np.array(g) if t.grad is None else t.grad + g


def _make(data, parents, backward):
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def backward(g):
        # zero at exact zeros (underflowed softmax entries) instead of inf
        return (np.divide(0.5 * g, out, out=np.zeros_like(out), where=out > 0),)

    return _make(out, (x,), backward)


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF via erf."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return _make(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def identity(x):
    return as_tensor(x)


# ---------------------------------------------------------------- reductions

def total(x):
    x = as_tensor(x)
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def row_sum(x):
    x = as_tensor(x)
    return _make(x.data.sum(axis=1), (x,), lambda g: (np.repeat(g[:, None], x.shape[1], axis=1),))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidInputError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


# ---------------------------------------------------------------- gather / scatter

def take(x, index):
    """Rows of ``x`` at ``index`` (repeats allowed)."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    return _make(x.data[index], (x,),
                 lambda g: (_backend.kernels().scatter_add(index, np.ascontiguousarray(g), n),))


def scatter_sum(values, index, n):
    """``out[k] = sum of values[e] with index[e] == k``."""
    values = as_tensor(values)
    index = np.asarray(index, dtype=np.int64)
    out = _backend.kernels().scatter_add(index, np.ascontiguousarray(values.data), n)
    return _make(out, (values,), lambda g: (g[index],))


def segment_sum(values, offsets):
    values = as_tensor(values)
    counts = np.diff(offsets)
    out = _backend.kernels().segment_sum(offsets, np.ascontiguousarray(values.data))
    return _make(out, (values,), lambda g: (np.repeat(g, counts, axis=0),))


def segment_mean(x, offsets):
    x = as_tensor(x)
    counts = np.diff(offsets)
    if np.any(counts == 0):
        raise InvalidInputError("cannot average an empty segment")
    out = _backend.kernels().segment_sum(offsets, np.ascontiguousarray(x.data)) / counts[:, None]
    return _make(out, (x,), lambda g: (np.repeat(g / counts[:, None], counts, axis=0),))


def segment_max(x, offsets):
    """Channel-wise max over each row segment; gradient goes to the first argmax."""
    x = as_tensor(x)
    if np.any(np.diff(offsets) == 0):
        raise InvalidInputError("cannot max-pool an empty segment")
    out, arg = _backend.kernels().segment_max(offsets, np.ascontiguousarray(x.data))

    def backward(g):
        gx = np.zeros(x.shape)
        cols = np.broadcast_to(np.arange(x.shape[1]), arg.shape)
        gx[arg.ravel(), cols.ravel()] = g.ravel()
        return (gx,)

    return _make(out, (x,), backward)


def segment_softmax(values, offsets):
    """Softmax of a flat edge array within each row segment."""
    values = as_tensor(values)
    counts = np.diff(offsets)
    k = _backend.kernels()
    out = k.segment_softmax(offsets, np.ascontiguousarray(values.data))

    def backward(g):
        dot = k.segment_sum(offsets, g * out)
        return (out * (g - np.repeat(dot, counts)),)

    return _make(out, (values,), backward)


def edge_dot(q, k, rows, cols):
    """Per-edge inner product ``q[rows[e]] . k[cols[e]]``."""
    q, k = as_tensor(q), as_tensor(k)
    kern = _backend.kernels()
    out = kern.edge_dot(rows, cols, q.data, k.data)

    def backward(g):
        gq = kern.scatter_add(rows, g[:, None] * k.data[cols], q.shape[0])
        gk = kern.scatter_add(cols, g[:, None] * q.data[rows], k.shape[0])
        return gq, gk

    return _make(out, (q, k), backward)


def spmm(offsets, cols, weights, x, rows=None):
    """Sparse-times-dense product with differentiable edge weights and features."""
    weights, x = as_tensor(weights), as_tensor(x)
    kern = _backend.kernels()
    out = kern.spmm(offsets, cols, weights.data, np.ascontiguousarray(x.data))
    if rows is None:
        rows = np.repeat(np.arange(offsets.shape[0] - 1, dtype=np.int64), np.diff(offsets))

    def backward(g):
        g = np.ascontiguousarray(g)
        gw = kern.edge_dot(rows, cols, g, x.data) if weights.requires_grad else None
        gx = kern.spmm_transpose(offsets, cols, weights.data, g, x.shape[0]) \
            if x.requires_grad else None
        return gw, gx

    return _make(out, (weights, x), backward)


# ---------------------------------------------------------------- training ops

def dropout(x, rate, rng, training=True):
    """Inverted dropout: kept units are scaled by ``1 / (1 - rate)``; identity in eval."""
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise InvalidInputError(f"dropout rate must be in [0, 1), got {rate}")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer ``labels`` under row-softmax of ``logits``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InvalidInputError("logits must be (B, C) with one label per row")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InvalidInputError("label out of range")
    logp = log_softmax(logits.data)
    b = logits.shape[0]
    loss = -logp[np.arange(b), labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(b), labels] -= 1.0
        return (grad * (float(g) / b),)

    return _make(np.asarray(loss), (logits,), backward)
