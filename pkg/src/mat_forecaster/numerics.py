"""Dense tensors with a reverse-mode gradient tape and the Adam optimizer.

Values are row-major numpy arrays, float32 by default; reductions accumulate
in float64 before casting back. Every op checks its output for NaN/Inf and
raises NumericError instead of letting bad values flow silently. The tape is
rebuilt on every forward pass and freed once backward() has run.

For gradient checking, build the same graph from float64 tensors: ops follow
numpy dtype promotion, so a float64 parameter set yields a float64 forward
pass (the "shadow" evaluation used by finite-difference oracles).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError, UsageError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference / oracle evals)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None):
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and (data.dtype == np.float32 or data.dtype == np.float64):
        return data
    return np.asarray(data, dtype=DEFAULT_DTYPE)


def _finite(arr):
    """One-pass NaN/Inf detection: any non-finite entry drives the float64 sum
    non-finite (inf plus -inf yields NaN). Finite inputs cannot overflow the
    float64 accumulator at the value ranges this library handles."""
    return bool(np.isfinite(np.sum(arr, dtype=np.float64)))


class Tensor:
    """A dense n-dimensional value, optionally recording how it was computed.

    `grad` is populated (and accumulated across backward calls) only on leaf
    tensors created with requires_grad=True.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        if not _finite(self.data):
            raise NumericError("tensor constructed with non-finite values")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

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
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are allowed on either side
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

    def __truediv__(self, c):
        if isinstance(c, Tensor):
            raise UsageError("tensor/tensor division is not supported; divide by a scalar")
        return mul(self, 1.0 / float(c))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose_last(self):
        return transpose_last(self)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node(data, op, parents, vjp):
    """Wrap an op result, checking finiteness and recording the tape edge."""
    if not _finite(data):
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    a, b = _coerce(a), _coerce(b)
    data = a.data + b.data

    def vjp(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _node(data, "add", (a, b), vjp)


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    data = a.data - b.data

    def vjp(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _node(data, "sub", (a, b), vjp)


def mul(a, b):
    """Element-wise product with broadcasting."""
    a, b = _coerce(a), _coerce(b)
    data = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape))

    return _node(data, "mul", (a, b), vjp)


def matmul(a, b):
    """Matrix product; leading axes broadcast as in numpy.matmul."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul expects >=2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return _node(data, "matmul", (a, b), vjp)


def relu(a):
    """Elementwise max(0, x); subgradient at exactly 0 is taken as 0."""
    a = _coerce(a)
    data = np.maximum(a.data, 0)

    def vjp(g):
        return (g * (a.data > 0),)

    return _node(data, "relu", (a,), vjp)


def log(a):
    a = _coerce(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _node(data, "log", (a,), vjp)


def tsum(a, axis=None, keepdims=False):
    """Sum with float64 accumulation, cast back to the input dtype."""
    a = _coerce(a)
    data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)
    if data.ndim == 0:
        data = data.reshape(())

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).astype(a.data.dtype, copy=False),)

    return _node(data, "sum", (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = _coerce(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = _coerce(a)
    data = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _node(data, "reshape", (a,), vjp)


def transpose_last(a):
    """Swap the two trailing axes."""
    a = _coerce(a)
    data = np.swapaxes(a.data, -1, -2)

    def vjp(g):
        return (np.swapaxes(g, -1, -2),)

    return _node(data, "transpose", (a,), vjp)


def concat(tensors, axis=-1):
    tensors = [_coerce(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(data, "concat", tuple(tensors), vjp)


def narrow(a, axis, start, length):
    """Contiguous slice of `length` entries along `axis`."""
    a = _coerce(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _node(data, "narrow", (a,), vjp)


def softmax(a, axis=-1):
    """Numerically stable softmax along `axis` (max subtraction)."""
    a = _coerce(a)
    if not _finite(a.data):
        raise NumericError("softmax received non-finite input")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    denom = np.sum(e, axis=axis, keepdims=True, dtype=np.float64).astype(a.data.dtype)
    s = e / denom

    def vjp(g):
        dot = np.sum(g * s, axis=axis, keepdims=True)
        return ((g - dot) * s,)

    return _node(s, "softmax", (a,), vjp)


def layer_norm(x, gain, bias, eps=1e-5):
    """Standardize the last axis (zero mean, unit variance), then gain*x + bias."""
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last axis {d} of {x.shape}"
        )
    mu = np.mean(x.data, axis=-1, keepdims=True, dtype=np.float64)
    var = np.mean((x.data - mu) ** 2, axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = ((x.data - mu) * inv).astype(x.data.dtype)
    out = gain.data * xhat + bias.data

    def vjp(g):
        gd = g * gain.data
        m1 = np.mean(gd, axis=-1, keepdims=True)
        m2 = np.mean(gd * xhat, axis=-1, keepdims=True)
        gx = inv * (gd - m1 - xhat * m2)
        ggain = _unbroadcast(g * xhat, gain.data.shape)
        gbias = _unbroadcast(g, bias.data.shape)
        return (gx, ggain, gbias)

    return _node(out, "layer_norm", (x, gain, bias), vjp)


def dropout(a, rate, rng):
    """Inverted dropout with a mask drawn from `rng`; identity when rng is None."""
    if rng is None or rate <= 0.0:
        return _coerce(a)
    a = _coerce(a)
    keep = (rng.random(a.shape) >= rate).astype(a.data.dtype)
    mask = keep / np.asarray(1.0 - rate, dtype=a.data.dtype)
    return mul(a, Tensor(mask))


def _toposort(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf.

    Repeated calls without zero_grad() add up. The traversed tape is freed
    afterwards, so a graph can be backpropagated only once.
    """
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor loss")
    if loss.size != 1:
        raise UsageError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor requiring gradients")

    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            # leaf parameter: accumulate
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    # free the tape
    for node in order:
        node._parents = ()
        node._vjp = None


@dataclass
class AdamState:
    """Adam moment buffers plus hyperparameters; one entry per parameter."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState) -> AdamState:
    """One Adam update with bias correction; mutates params in place.

    `params` is a sequence of Tensors, `grads` an aligned sequence of arrays
    (or None for parameters untouched this step).
    """
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise DimensionError(f"adam_step got {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data, dtype=np.float32) for p in params]
        state.v = [np.zeros_like(p.data, dtype=np.float32) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        g = np.asarray(g)
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m = state.m[i]
        v = state.v[i]
        if m.shape != p.data.shape:
            raise DimensionError(f"Adam state shape {m.shape} does not match parameter {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data = p.data - (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)
    return state


def zero_grads(params):
    for p in params:
        p.grad = None
