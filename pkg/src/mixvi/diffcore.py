"""Dense float64 tensors with reverse-mode differentiation and Adam.

Define-by-run: while a `Tape` is active (used as a context manager), every
operation records itself on it; the tape is rebuilt each training step.
Creation order is a valid topological order, so the backward pass is a
single reversed sweep that visits each node exactly once. Without an
active tape, the same operations just compute values, which is the cheap
no-gradient evaluation mode.

Broadcasting is limited to scalar operands and trailing-dimension
alignment ((d,) against (B, d)); nothing in this package needs more.
"""

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, DomainError, NumericalError, TrainingError

_TAPES = []  # stack of active tapes


class Tensor:
    """Array value, optionally a node in the active tape's graph."""

    __slots__ = ("data", "grad", "_parents", "_backward", "name")

    def __init__(self, data, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    # arithmetic sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


class Parameter(Tensor):
    """Trainable leaf. `bias=True` marks bias vectors so parameter counts
    can be reported with and without them."""

    __slots__ = ("bias",)

    def __init__(self, data, name, bias=False):
        super().__init__(data, name=name)
        self.bias = bias


class Tape:
    """Records ops in creation order; replays adjoints in reverse."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self

    def backward(self, loss):
        """Fill .grad on every tensor `loss` depends on. Scalar loss only."""
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        # reset adjoints of everything reachable through this tape
        for node in self.nodes:
            node.grad = None
            for p in node._parents:
                p.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)

    def gradient(self, loss, params):
        """backward() then gather grads; parameters the loss never touched
        get exact zeros."""
        self.backward(loss)
        return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _node(value, parents, backward):
    out = Tensor(value)
    if _TAPES:
        out._parents = parents
        out._backward = backward
        _TAPES[-1].nodes.append(out)
    return out


def custom_op(value, parents, backward):
    """Extension point: register an externally computed op on the active
    tape. `backward(out_grad)` must accumulate into the parents' .grad
    via their `.grad` buffers (use `accumulate`)."""
    return _node(value, tuple(parents), backward)


accumulate = _accumulate


def _check_broadcast(sa, sb):
    if sa == sb or sa == () or sb == ():
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] == short:
        return
    raise DimensionError(f"shapes {sa} and {sb} do not conform (trailing/scalar broadcast only)")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.data.shape, b.data.shape)
    value = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(value, (a, b), backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.data.shape, b.data.shape)
    value = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(value, (a, b), backward)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.data.shape, b.data.shape)
    value = a.data / b.data
    if not np.isfinite(value).all():
        raise NumericalError("division produced non-finite values")

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(value, (a, b), backward)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim > 2 or b.data.ndim > 2 or a.data.ndim == 0 or b.data.ndim == 0:
        raise DimensionError("matmul supports 1-D and 2-D operands")
    if a.data.shape[-1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    value = a.data @ b.data

    def backward(g):
        g = np.asarray(g)
        if a.data.ndim == 2 and b.data.ndim == 2:
            _accumulate(a, g @ b.data.T)
            _accumulate(b, a.data.T @ g)
        elif a.data.ndim == 1 and b.data.ndim == 2:
            _accumulate(a, b.data @ g)
            _accumulate(b, np.outer(a.data, g))
        elif a.data.ndim == 2 and b.data.ndim == 1:
            _accumulate(a, np.outer(g, b.data))
            _accumulate(b, a.data.T @ g)
        else:  # 1-D @ 1-D
            _accumulate(a, g * b.data)
            _accumulate(b, g * a.data)

    return _node(value, (a, b), backward)


def exp(a):
    a = _wrap(a)
    value = np.exp(a.data)
    if not np.isfinite(value).all():
        raise NumericalError("exp overflowed")

    def backward(g):
        _accumulate(a, g * value)

    return _node(value, (a,), backward)


def log(a):
    a = _wrap(a)
    if (a.data <= 0).any():
        raise DomainError("log of non-positive input")
    value = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return _node(value, (a,), backward)


def sqrt(a):
    a = _wrap(a)
    if (a.data < 0).any():
        raise DomainError("sqrt of negative input")
    value = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g * 0.5 / value)

    return _node(value, (a,), backward)


def tanh(a):
    a = _wrap(a)
    value = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - value * value))

    return _node(value, (a,), backward)


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a):
    a = _wrap(a)
    value = _sigmoid_np(a.data)

    def backward(g):
        _accumulate(a, g * value * (1.0 - value))

    return _node(value, (a,), backward)


def softplus(a):
    a = _wrap(a)
    value = np.logaddexp(0.0, a.data)

    def backward(g):
        _accumulate(a, g * _sigmoid_np(a.data))

    return _node(value, (a,), backward)


def tsum(a, axis=None):
    a = _wrap(a)
    value = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape))

    return _node(value, (a,), backward)


def mean(a, axis=None):
    a = _wrap(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def logsumexp(a, axis):
    a = _wrap(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    value = (np.log(total) + m).squeeze(axis=axis)

    def backward(g):
        _accumulate(a, np.expand_dims(g, axis) * shifted / total)

    return _node(value, (a,), backward)


def stack(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ContractError("stack of zero tensors")
    value = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            _accumulate(t, np.take(g, i, axis=axis))

    return _node(value, tuple(tensors), backward)


def concat(tensors, axis=-1):
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of zero tensors")
    value = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offsets = np.cumsum([0] + sizes)
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _node(value, tuple(tensors), backward)


def take(a, idx):
    """Basic slicing/indexing with constant index."""
    a = _wrap(a)
    value = a.data[idx]

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        _accumulate(a, buf)

    return _node(value, (a,), backward)


def reshape(a, shape):
    a = _wrap(a)
    value = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _node(value, (a,), backward)


def square(a):
    return mul(a, a)


class Adam:
    """Adam with bias correction over a fixed parameter list.

    Parameters with a missing gradient are treated as zero-gradient
    (their moments decay, first step leaves them untouched).
    """

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise TrainingError(f"non-finite gradient for parameter {p.name!r}")
            kernels.adam_update(p.data, g, m, v, self.step_count,
                                self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
