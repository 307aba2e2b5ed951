"""
Reverse-mode automatic differentiation over dense float64 arrays
Tensors are immutable; a Tape records primitives define-by-run and is
thrown away after each backward pass
"""

import logging
import threading
from contextlib import contextmanager

import numpy as np

from core.errors import ContractViolation, DegenerateInputError, NumericError, TapeError

logger = logging.getLogger(__name__)

_local = threading.local()


class Tensor:
    """Immutable dense array with an optional handle onto the tape that produced it"""

    __slots__ = ("data", "requires_grad", "name", "node_id", "_tape")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.node_id = None
        self._tape = None

    @classmethod
    def _wrap(cls, arr, requires_grad=False, name=None):
        # no-copy constructor for arrays produced inside this module
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.flags.writeable:
            arr.setflags(write=False)
        out.data = arr
        out.requires_grad = requires_grad
        out.name = name
        out.node_id = None
        out._tape = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor._wrap(self.data, name=self.name)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" '{self.name}'" if self.name else ""
        return f"<Tensor{label} shape={self.shape}{flag}>"

    # operator sugar; every method lands on a primitive below
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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractViolation("division is only defined by a python scalar")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def parameter(data, name=None):
    """Create a trainable leaf tensor"""
    return Tensor(data, requires_grad=True, name=name)


def constant(data):
    """Create a non-trainable tensor"""
    return Tensor(data)


class _Node:
    __slots__ = ("parents", "backward", "op")

    def __init__(self, op, parents, backward):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of the primitives executed while the tape is active"""

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, op, out, parents, backward):
        for parent in parents:
            if parent.node_id is not None and parent._tape is not self:
                raise TapeError(f"{op}: input was recorded on a different tape")
        node_id = len(self._nodes)
        self._nodes.append(_Node(op, parents, backward))
        tensor = Tensor._wrap(out, requires_grad=True)
        tensor._tape = self
        tensor.node_id = node_id
        return tensor

    def backward(self, loss, params):
        """Propagate d(loss)/d(node) from the loss back to the leaves"""
        node_grads = {loss.node_id: np.ones(loss.shape)}
        leaf_grads = {}
        for idx in range(loss.node_id, -1, -1):
            g = node_grads.pop(idx, None)
            if g is None:
                continue
            node = self._nodes[idx]
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ContractViolation(
                        f"{node.op}: gradient shape {pg.shape} does not match input shape {parent.shape}"
                    )
                if parent.node_id is not None:
                    prev = node_grads.get(parent.node_id)
                    node_grads[parent.node_id] = pg if prev is None else prev + pg
                else:
                    key = id(parent)
                    prev = leaf_grads.get(key)
                    leaf_grads[key] = pg if prev is None else prev + pg

        grads = {}
        for name, param in params.items():
            if not param.requires_grad:
                continue
            g = leaf_grads.get(id(param))
            grads[name] = Tensor._wrap(np.zeros(param.shape) if g is None else g)
        return grads


def active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@contextmanager
def no_tape():
    """Suspend recording; everything computed inside is a constant"""
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def grad(loss, params, tape=None):
    """Gradients of a scalar loss for every trainable tensor in ``params``

    Parameters the loss does not reach get a zero gradient; frozen
    parameters (requires_grad=False) are left out of the result.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise ContractViolation(f"grad() needs a scalar loss, got {shape}")
    if loss.node_id is None or loss._tape is None:
        raise TapeError("loss is detached: it was not computed on an active tape")
    tape = tape or active_tape()
    if tape is not None and loss._tape is not tape:
        raise TapeError("loss was recorded on a different tape")
    return loss._tape.backward(loss, params)


def _as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.array(value, dtype=np.float64))


def _apply(op, out, parents, backward):
    tape = active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor._wrap(out)
    return tape._record(op, out, parents, backward)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)"""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _apply("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _apply("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    """Elementwise product"""
    a, b = _as_tensor(a), _as_tensor(b)
    return _apply("mul", a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _apply("matmul", np.matmul(a.data, b.data), (a, b), backward)


def sqrt(x):
    out = np.sqrt(x.data)

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * 0.5 / safe, 0.0),)

    return _apply("sqrt", out, (x,), backward)


def sigmoid(x):
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _apply("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """GELU, tanh approximation"""
    xd = x.data
    t = np.tanh(_GELU_C * (xd + 0.044715 * xd ** 3))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _apply("gelu", out, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize over the last axis, then scale and shift"""
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = (inv / n) * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                          - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _apply("layer_norm", out, (x, gamma, beta), backward)


# ---------------------------------------------------------------- shape ops

def reshape(x, shape):
    return _apply("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    inverse = np.argsort(axes)
    return _apply("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def broadcast_to(x, shape):
    out = np.array(np.broadcast_to(x.data, shape))
    return _apply("broadcast_to", out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractViolation("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _apply("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _apply("stack", np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def narrow(x, axis, start, stop):
    """Contiguous slice ``start:stop`` along one axis"""
    axis = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        gx = np.zeros(x.shape)
        gx[index] = g
        return (gx,)

    return _apply("narrow", x.data[index].copy(), (x,), backward)


def index_select(x, indices, axis=0):
    """Gather entries along ``axis``; repeated indices accumulate their gradients"""
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    if axis != 0 and idx.ndim != 1:
        raise ContractViolation("index_select on a non-leading axis takes a 1-D index")

    def backward(g):
        gx = np.zeros(x.shape)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0) if axis else g)
        return (gx,)

    return _apply("index_select", np.take(x.data, idx, axis=axis), (x,), backward)


def take_along(x, indices):
    """Per-row gather along the last axis"""
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take_along_axis(x.data, idx, axis=-1)

    def backward(g):
        gx = np.zeros(x.shape)
        grid = np.indices(idx.shape, sparse=True)
        np.add.at(gx, tuple(grid[:-1]) + (idx,), g)
        return (gx,)

    return _apply("take_along", out, (x,), backward)


# ---------------------------------------------------------------- reductions

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)
    return _apply("sum", out, (x,), lambda g: (np.array(_expand_reduced(g, x.shape, axis, keepdims)),))


def mean(x, axis=None, keepdims=False):
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size / max(out.size, 1)
    return _apply("mean", out, (x,),
                  lambda g: (np.array(_expand_reduced(g, x.shape, axis, keepdims)) / count,))


# ---------------------------------------------------------------- softmax family

def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: NaN or infinite value in input")


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _apply("softmax", s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _apply("log_softmax", out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def logsumexp(x, axis=-1, keepdims=False):
    m = x.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True))
    s = np.exp(x.data - lse)
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def backward(g):
        return (s * (g if keepdims else np.expand_dims(g, axis)),)

    return _apply("logsumexp", out, (x,), backward)


def softmax_with_temperature(logits, tau):
    """Soft targets p_i = exp(z_i/tau) / sum_j exp(z_j/tau) over the last axis"""
    logits = _as_tensor(logits)
    if not tau > 0:
        raise ContractViolation(f"temperature must be positive, got {tau}")
    _check_finite(logits.data, "softmax_with_temperature")
    return softmax(mul(logits, 1.0 / tau), axis=-1)


# ---------------------------------------------------------------- losses and similarities

def kl_divergence(p, log_q, axis=-1):
    """sum p * (log p - log q) along ``axis``; terms with p == 0 contribute 0

    The second argument is a log-probability so callers can pass a
    log_softmax output without losing precision.
    """
    p, log_q = _as_tensor(p), _as_tensor(log_q)
    positive = p.data > 0
    log_p = np.log(np.where(positive, p.data, 1.0))
    terms = np.where(positive, p.data * (log_p - log_q.data), 0.0)
    out = terms.sum(axis=axis)

    def backward(g):
        ge = np.expand_dims(g, axis)
        gp = np.where(positive, (log_p - log_q.data + 1.0), 0.0) * ge
        return gp, -p.data * ge

    return _apply("kl_divergence", out, (p, log_q), backward)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)"""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ContractViolation(f"cross_entropy expects [B, C] logits and [B] labels, got {logits.shape}, {labels.shape}")
    _check_finite(logits.data, "cross_entropy")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(labels.shape[0])
    out = -log_probs[rows, labels].mean()

    def backward(g):
        d = np.exp(log_probs)
        d[rows, labels] -= 1.0
        return (d * (g / labels.shape[0]),)

    return _apply("cross_entropy", np.array(out), (logits,), backward)


def mse(a, b):
    """Mean of squared elementwise differences"""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ContractViolation(f"mse operands differ in shape: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return _apply("mse", np.array((diff ** 2).mean()), (a, b), backward)


def cosine_similarity(a, b, axis=-1):
    """<a, b> / (|a| |b|) along ``axis``; zero-norm inputs are rejected"""
    a, b = _as_tensor(a), _as_tensor(b)
    na = np.sqrt((a.data ** 2).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data ** 2).sum(axis=axis, keepdims=True))
    if (na == 0).any() or (nb == 0).any():
        raise DegenerateInputError("cosine_similarity: zero-norm vector")
    if a.shape[axis] != b.shape[axis]:
        raise ContractViolation(f"cosine_similarity: lengths differ ({a.shape[axis]} vs {b.shape[axis]})")
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    denom = na * nb
    cos = dot / denom

    def backward(g):
        ge = np.expand_dims(g, axis)
        ga = ge * (b.data / denom - cos * a.data / (na * na))
        gb = ge * (a.data / denom - cos * b.data / (nb * nb))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _apply("cosine_similarity", np.squeeze(cos, axis=axis), (a, b), backward)
