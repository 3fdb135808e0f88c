"""Reverse-mode automatic differentiation over dense numpy arrays.

Exactly the operations the generator needs: matrix products, elementwise
arithmetic, the stable softmax family, concatenation/stacking, embedding
rows, inverted dropout, and a fused LSTM gate op.  Forward results are
recorded on an explicit :class:`Tape`; ``tape.backward(loss)`` replays the
records in reverse and accumulates gradients into ``Tensor.grad``.

Precision: tensors carry float32 (training default) or float64 (gradient
checking).  Ops never mutate values in place; parameter updates happen
between tapes, so views handed out during a forward pass stay valid for
the matching backward sweep.
"""

import threading

import numpy as np

from . import kernels
from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    VocabularyError,
)

FLOAT_DTYPES = (np.float32, np.float64)
DEFAULT_DTYPE = np.float32

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape():
    """The innermost Tape entered on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense value plus a lazily allocated same-shape gradient buffer.

    ``node_id`` indexes the producing record on the active tape; constants
    and parameters keep it None.  A None ``grad`` reads as all-zeros.
    """

    __slots__ = ("values", "grad", "node_id", "name")

    def __init__(self, values, dtype=None, name=None):
        arr = np.asarray(values)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.values = arr
        self.grad = None
        self.node_id = None
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def grad_or_zeros(self):
        return self.grad if self.grad is not None else np.zeros_like(self.values)

    def __repr__(self):
        tag = " name=%r" % self.name if self.name else ""
        return "Tensor(shape=%s, dtype=%s%s)" % (self.shape, self.dtype.name, tag)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of forward ops; inputs always precede their consumers."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def record(self, out, parents, backward):
        out.node_id = len(self.nodes)
        self.nodes.append(_Node(out, parents, backward))

    def backward(self, loss):
        """Populate grads of everything loss depends on; one visit per node."""
        if loss.shape != ():
            raise ContractError(
                "backward requires a scalar loss, got shape %s" % (loss.shape,)
            )
        loss.accumulate_grad(np.ones((), dtype=loss.dtype))
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            node.backward(g)


def _record(out, parents, backward):
    tape = active_tape()
    if tape is not None:
        tape.record(out, parents, backward)
    return out


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# ops


def matmul(a, b):
    """Matrix/vector product; 1-D operands follow the usual vector rules."""
    av, bv = a.values, b.values
    if av.ndim == 0 or bv.ndim == 0 or av.ndim > 2 or bv.ndim > 2:
        raise DimensionError("matmul supports 1-D/2-D operands, got %s x %s"
                             % (av.shape, bv.shape))
    if av.shape[-1] != bv.shape[0]:
        raise DimensionError("matmul inner dimensions disagree: %s x %s"
                             % (av.shape, bv.shape))
    out = Tensor(np.matmul(av, bv), dtype=av.dtype)

    def backward(g):
        if av.ndim == 2 and bv.ndim == 2:
            a.accumulate_grad(g @ bv.T)
            b.accumulate_grad(av.T @ g)
        elif av.ndim == 2:                      # (m,k) @ (k,)
            a.accumulate_grad(np.outer(g, bv))
            b.accumulate_grad(av.T @ g)
        elif bv.ndim == 2:                      # (k,) @ (k,n)
            a.accumulate_grad(bv @ g)
            b.accumulate_grad(np.outer(av, g))
        else:                                   # dot product
            a.accumulate_grad(g * bv)
            b.accumulate_grad(g * av)

    return _record(out, (a, b), backward)


def transpose(a):
    if a.values.ndim != 2:
        raise DimensionError("transpose expects a matrix, got %s" % (a.shape,))
    out = Tensor(a.values.T, dtype=a.dtype)

    def backward(g):
        a.accumulate_grad(g.T)

    return _record(out, (a,), backward)


def _binary_shapes(a, b, op):
    if a.values.shape != b.values.shape:
        raise DimensionError("%s requires equal shapes, got %s vs %s"
                             % (op, a.shape, b.shape))


def add(a, b):
    _binary_shapes(a, b, "add")
    out = Tensor(a.values + b.values, dtype=a.dtype)

    def backward(g):
        a.accumulate_grad(g)
        b.accumulate_grad(g)

    return _record(out, (a, b), backward)


def sub(a, b):
    _binary_shapes(a, b, "sub")
    out = Tensor(a.values - b.values, dtype=a.dtype)

    def backward(g):
        a.accumulate_grad(g)
        b.accumulate_grad(-g)

    return _record(out, (a, b), backward)


def mul(a, b):
    _binary_shapes(a, b, "mul")
    av, bv = a.values, b.values
    out = Tensor(av * bv, dtype=a.dtype)

    def backward(g):
        a.accumulate_grad(g * bv)
        b.accumulate_grad(g * av)

    return _record(out, (a, b), backward)


def bias_add(mat, vec):
    """Row-broadcast add: (m, n) + (n,).  The one sanctioned broadcast."""
    if mat.values.ndim != 2 or vec.values.ndim != 1 \
            or mat.values.shape[1] != vec.values.shape[0]:
        raise DimensionError("bias_add expects (m,n) + (n,), got %s + %s"
                             % (mat.shape, vec.shape))
    out = Tensor(mat.values + vec.values, dtype=mat.dtype)

    def backward(g):
        mat.accumulate_grad(g)
        vec.accumulate_grad(g.sum(axis=0))

    return _record(out, (mat, vec), backward)


def scale(a, alpha):
    alpha = float(alpha)
    out = Tensor(a.values * np.asarray(alpha, dtype=a.dtype), dtype=a.dtype)

    def backward(g):
        a.accumulate_grad(g * alpha)

    return _record(out, (a,), backward)


def tanh(a):
    out_values = np.tanh(a.values)
    out = Tensor(out_values, dtype=a.dtype)

    def backward(g):
        a.accumulate_grad(g * (1.0 - out_values * out_values))

    return _record(out, (a,), backward)


def sigmoid(a):
    out_values = kernels.backend_numpy.sigmoid(a.values)
    out = Tensor(out_values, dtype=a.dtype)

    def backward(g):
        a.accumulate_grad(g * out_values * (1.0 - out_values))

    return _record(out, (a,), backward)


def softmax(v):
    """Stable softmax of a vector; output sums to 1."""
    if v.values.ndim != 1 or v.values.shape[0] < 1:
        raise DimensionError("softmax expects a non-empty vector, got %s"
                             % (v.shape,))
    shifted = v.values - v.values.max()
    ex = np.exp(shifted)
    out_values = ex / ex.sum()
    out = Tensor(out_values, dtype=v.dtype)

    def backward(g):
        v.accumulate_grad(out_values * (g - np.dot(g, out_values)))

    return _record(out, (v,), backward)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of zero tensors")
    ndim = tensors[0].values.ndim
    for t in tensors[1:]:
        ta, tb = tensors[0].values.shape, t.values.shape
        if t.values.ndim != ndim or \
                ta[:axis] + ta[axis + 1:] != tb[:axis] + tb[axis + 1:]:
            raise DimensionError("concat non-axis dims disagree: %s vs %s"
                                 % (ta, tb))
    out = Tensor(np.concatenate([t.values for t in tensors], axis=axis),
                 dtype=tensors[0].dtype)
    sizes = [t.values.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            idx = [slice(None)] * ndim
            idx[axis] = slice(offset, offset + size)
            t.accumulate_grad(g[tuple(idx)])
            offset += size

    return _record(out, tuple(tensors), backward)


def stack_rows(tensors):
    """Stack equal-length vectors into a (T, d) matrix."""
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("stack_rows of zero tensors")
    d = tensors[0].values.shape
    for t in tensors:
        if t.values.ndim != 1 or t.values.shape != d:
            raise DimensionError("stack_rows expects equal vectors")
    out = Tensor(np.stack([t.values for t in tensors]), dtype=tensors[0].dtype)

    def backward(g):
        for row, t in enumerate(tensors):
            t.accumulate_grad(g[row])

    return _record(out, tuple(tensors), backward)


def slice1d(a, lo, hi):
    if a.values.ndim != 1 or not (0 <= lo <= hi <= a.values.shape[0]):
        raise DimensionError("bad slice [%d:%d] of %s" % (lo, hi, a.shape))
    out = Tensor(a.values[lo:hi], dtype=a.dtype)

    def backward(g):
        full = np.zeros_like(a.values)
        full[lo:hi] = g
        a.accumulate_grad(full)

    return _record(out, (a,), backward)


def embedding_lookup(table, index):
    """Row ``index`` of an embedding matrix; gradient lands in that row only."""
    index = int(index)
    if table.values.ndim != 2:
        raise DimensionError("embedding table must be a matrix, got %s"
                             % (table.shape,))
    if not 0 <= index < table.values.shape[0]:
        raise VocabularyError("embedding index %d outside table of %d rows"
                              % (index, table.values.shape[0]))
    out = Tensor(table.values[index], dtype=table.dtype)

    def backward(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.values)
        table.grad[index] += g

    return _record(out, (table,), backward)


def dropout(t, p, training, rng):
    """Inverted dropout: identity in eval mode, scaled mask when training."""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError("dropout probability must be in [0,1), got %r" % p)
    if not training or p == 0.0:
        return t
    mask = (rng.random(t.values.shape) >= p).astype(t.dtype)
    keep = np.asarray(1.0 - p, dtype=t.dtype)
    out = Tensor(t.values * mask / keep, dtype=t.dtype)

    def backward(g):
        t.accumulate_grad(g * mask / keep)

    return _record(out, (t,), backward)


def lstm_gates(z, c_prev):
    """Fused LSTM cell tail: gate preactivations (4H,) + c_prev (H,) -> (2H,).

    Output is [h, c]; split it with slice1d.  Gate order inside z is
    input, forget, output, candidate.
    """
    hdim = c_prev.values.shape[0]
    if z.values.ndim != 1 or z.values.shape[0] != 4 * hdim:
        raise DimensionError("lstm_gates expects z of shape (4H,), got %s with H=%d"
                             % (z.shape, hdim))
    h, c, i, f, o, g_, tc = kernels.lstm_gates_forward(z.values, c_prev.values)
    out = Tensor(np.concatenate([h, c]), dtype=z.dtype)

    def backward(g):
        dz, dc_prev = kernels.lstm_gates_backward(
            np.ascontiguousarray(g[:hdim]), np.ascontiguousarray(g[hdim:]),
            i, f, o, g_, c_prev.values, tc)
        z.accumulate_grad(dz)
        c_prev.accumulate_grad(dc_prev)

    return _record(out, (z, c_prev), backward)


def nll_logits(logits, target):
    """Negative log likelihood of ``target`` under softmax(logits).

    Computed as logsumexp(logits) - logits[target]; never forms the
    probability vector, so it is stable for any finite logits.
    """
    target = int(target)
    if logits.values.ndim != 1:
        raise DimensionError("nll_logits expects a logit vector, got %s"
                             % (logits.shape,))
    if not 0 <= target < logits.values.shape[0]:
        raise VocabularyError("target index %d outside %d logits"
                              % (target, logits.values.shape[0]))
    m = logits.values.max()
    ex = np.exp(logits.values - m)
    lse = m + np.log(ex.sum())
    out = Tensor(np.asarray(lse - logits.values[target], dtype=logits.dtype))
    probs = ex / ex.sum()

    def backward(g):
        d = probs.copy()
        d[target] -= 1.0
        logits.accumulate_grad(g * d)

    return _record(out, (logits,), backward)


def tensor_sum(a):
    out = Tensor(np.asarray(a.values.sum(), dtype=a.dtype))

    def backward(g):
        a.accumulate_grad(np.full_like(a.values, g))

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# randomness and initialization


class RngState:
    """Counter-based RNG: every draw is a pure function of (seed, counter).

    Restoring a state is O(1): rebuild with the recorded counter.  Identical
    seed and draw sequence give identical outputs on any platform numpy
    supports.
    """

    def __init__(self, seed, counter=0):
        self.seed = int(seed)
        self.counter = int(counter)

    def _next(self):
        gen = np.random.default_rng((self.seed, self.counter))
        self.counter += 1
        return gen

    def random(self, shape=()):
        return self._next().random(shape)

    def uniform(self, low, high, shape=()):
        return self._next().uniform(low, high, shape)

    def permutation(self, n):
        return self._next().permutation(n)

    def choice_index(self, weights):
        """Sample an index proportionally to non-negative weights."""
        w = np.asarray(weights, dtype=np.float64)
        return int(self._next().choice(len(w), p=w / w.sum()))

    def clone(self):
        return RngState(self.seed, self.counter)

    def spawn(self, stream):
        """Independent child stream; deterministic in (seed, stream)."""
        return RngState(self.seed * 1_000_003 + int(stream))


def glorot_init(rows, cols, rng, dtype=DEFAULT_DTYPE, name=None):
    """Uniform init in +-sqrt(6 / (rows + cols))."""
    if rows < 1 or cols < 1:
        raise DimensionError("glorot_init needs positive dims, got %dx%d"
                             % (rows, cols))
    bound = np.sqrt(6.0 / (rows + cols))
    values = rng.uniform(-bound, bound, (rows, cols)).astype(dtype)
    return Tensor(values, dtype=dtype, name=name)


def assert_finite(t, context=""):
    from .errors import NumericError

    if not np.all(np.isfinite(t.values)):
        raise NumericError("non-finite values%s" %
                           (" in " + context if context else ""))
    return t
