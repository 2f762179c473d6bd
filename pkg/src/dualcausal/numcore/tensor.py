"""Dense float64 tensors with a reverse-mode tape.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
:meth:`Tensor.backward` walks the recorded graph in reverse topological
order.  The graph is released after the walk unless ``retain_graph=True``.
"""

from __future__ import annotations

import contextlib

import numpy as np

from ..errors import ContractError, DimensionError, NumericError

LOG_CLAMP = 1e-12

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A real array that can take part in reverse-mode differentiation.

    Parameters
    ----------
    data : array_like
        Converted to a C-contiguous float64 array.
    requires_grad : bool
        Whether gradients should be accumulated into ``grad``.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._freed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        return self.data.shape[0]

    # operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # differentiation ------------------------------------------------
    def backward(self, retain_graph=False):
        """Accumulate d(self)/d(leaf) into every reachable ``grad``.

        Leaf gradients accumulate across calls; call ``zero_grad`` on the
        leaves (or the optimizer) to reset.  Without ``retain_graph`` the
        recorded graph is released and a second call raises.
        """
        if self.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._freed:
            raise ContractError("graph already released; pass retain_graph=True to reuse it")
        order = _topological(self)
        for node in order:
            if node._parents:
                node.grad = None
        self.grad = np.ones_like(self.data) if self.grad is None or self._parents else self.grad + 1.0
        for node in reversed(order):
            if not node._parents or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64)
                else:
                    parent.grad = parent.grad + g
        if not retain_graph:
            for node in order:
                if node._parents:
                    node._parents = ()
                    node._backward = None
                    node._freed = True


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# elementwise ----------------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a, clamp=LOG_CLAMP):
    """Natural log of ``max(a, clamp)``; the clamp blocks the gradient below it."""
    x = a.data
    safe = np.maximum(x, clamp)
    return _make(np.log(safe), (a,), lambda g: (g * (x >= clamp) / safe,))


def square(a):
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,))


def relu(a):
    """max(x, 0) with subgradient 0 at exactly 0."""
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def clamp(a, lo, hi):
    x = a.data
    mask = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * mask,))


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


# reductions and shape -------------------------------------------------
def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a):
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def take(a, index):
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), backward)


def matmul(a, b):
    """Matrix product of an (m, k) and a (k, n) tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def concat(a, b):
    """Concatenate along the last axis; leading dimensions must agree."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat leading shapes differ: {a.shape} vs {b.shape}")
    p = a.shape[-1]
    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b),
                 lambda g: (g[..., :p], g[..., p:]))


def concat_many(tensors):
    out = tensors[0]
    for t in tensors[1:]:
        out = concat(out, t)
    return out


# row-wise normalisers -------------------------------------------------
def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what}: non-finite input")


def softmax_rows(x, scale=1.0):
    """Row-wise softmax of ``scale * x``, stabilised by the row maximum."""
    if not (np.isfinite(scale) and scale > 0):
        raise NumericError(f"softmax scale must be finite and positive, got {scale}")
    if x.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"softmax_rows expects (m, n>=1), got {x.shape}")
    _check_finite(x.data, "softmax_rows")
    z = scale * x.data
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return (scale * out * (g - inner),)

    return _make(out, (x,), backward)


def log_softmax_rows(x):
    _check_finite(x.data, "log_softmax_rows")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    # log1p of the non-max mass keeps tiny losses strictly positive
    rows = np.arange(z.shape[0])
    others = e.copy()
    others[rows, np.argmax(z, axis=1)] = 0.0
    rest = others.sum(axis=1)
    out = z - np.log1p(rest)[:, None]
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def logsumexp_rows(x):
    _check_finite(x.data, "logsumexp_rows")
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    p = e / s
    return _make(out, (x,), lambda g: (g[:, None] * p,))


# losses ---------------------------------------------------------------
def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, v = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= v):
        raise IndexError(f"label out of range for {v} classes")
    logp = log_softmax_rows(logits)
    picked = take(logp, (np.arange(n), labels))
    return -mean(picked)


def kl_divergence(p, q):
    """Batch mean of sum_v p log(p / q).

    Terms with p == 0 contribute 0.  ``q`` is clamped at 1e-12 before the
    log, so an exact zero in q where p > 0 yields a large finite value.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence shapes differ: {p.shape} vs {q.shape}")
    pd = p.data
    mask = pd > 0
    safe_p = np.where(mask, pd, 1.0)
    qd = np.maximum(q.data, LOG_CLAMP)
    n = pd.shape[0]
    val = float(np.sum(np.where(mask, pd * (np.log(safe_p) - np.log(qd)), 0.0))) / n

    def backward(g):
        gp = np.where(mask, np.log(safe_p) - np.log(qd) + 1.0, 0.0) * g / n
        gq = np.where(q.data >= LOG_CLAMP, -pd / qd, 0.0) * g / n
        return (gp, gq)

    return _make(np.array(val), (p, q), backward)


def kl_from_logits(teacher_logits, student_logits):
    """KL(softmax(teacher) || softmax(student)) computed with log-softmax."""
    lp = log_softmax_rows(teacher_logits)
    lq = log_softmax_rows(student_logits)
    p = exp(lp)
    n = teacher_logits.shape[0]
    return tsum(p * (lp - lq)) * (1.0 / n)

