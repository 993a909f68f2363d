"""Dense float64 tensors with tape-based reverse-mode differentiation.

The engine is deliberately small: a ``Tensor`` wraps a row-major float64
numpy array, and while a ``Graph`` is active every differentiable op appends
one node (inputs, output, backward closure) to the tape.  The append order
is a valid topological order, so ``backward`` walks the tape once in
reverse.  Gradients are accumulated additively into ``requires_grad``
leaves; callers zero them explicitly between steps.  Running ``backward``
twice over the same tape adds the same contributions a second time.

Without an active graph every op just computes values, which is what
read-only inference from a frozen parameter store uses.
"""

import threading

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError, ParameterError, ShapeError

_LOCAL = threading.local()

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _graph_stack():
    if not hasattr(_LOCAL, "stack"):
        _LOCAL.stack = []
    return _LOCAL.stack


def active_graph():
    """The innermost live Graph on this thread, or None."""
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array plus the bookkeeping reverse mode needs.

    ``grad`` stays None until a backward pass deposits something; it always
    has the same shape as ``data``.  ``node`` is set on tensors produced by
    a recorded op and is None on leaves and constants.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """Copy of the value with no graph attachment."""
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are allowed on either side
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def constant(data):
    """Tensor that never receives gradients."""
    return Tensor(data, requires_grad=False)


def param(data):
    """Trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


class _Node:
    __slots__ = ("inputs", "out", "backward", "graph")

    def __init__(self, inputs, out, backward, graph):
        self.inputs = inputs
        self.out = out
        self.backward = backward
        self.graph = graph


class Graph:
    """Append-only tape of recorded ops.

    Use as a context manager around a forward pass; call :func:`backward`
    (or ``Graph.backward``) on a scalar loss recorded on it.  ``reset``
    empties the tape so the object can be reused.
    """

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _graph_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    def reset(self):
        self._nodes.clear()

    def _record(self, inputs, out, backward_fn):
        out.node = _Node(inputs, out, backward_fn, self)
        self._nodes.append(out.node)

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

        Returns a dict mapping each touched leaf Tensor to its (total,
        accumulated) gradient array.  The tape is walked once in reverse
        append order; nodes that do not feed the loss receive no gradient
        and are skipped.
        """
        if not isinstance(loss, Tensor) or loss.node is None:
            raise ContractError("backward: loss was not recorded on this graph")
        if loss.data.size != 1:
            raise ContractError(f"backward: loss must be scalar, got shape {loss.data.shape}")
        if loss.node.graph is not self:
            raise ContractError("backward: loss belongs to a different graph")

        flowing = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self._nodes):
            g = flowing.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.inputs, parent_grads):
                if pg is None:
                    continue
                if parent.node is not None:
                    key = id(parent.node.out)
                    if key in flowing:
                        flowing[key] = flowing[key] + pg
                    else:
                        flowing[key] = pg
                elif parent.requires_grad:
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.data)
                    parent.grad += pg
                    leaves[parent] = parent.grad
        return leaves


def backward(loss):
    """Run the backward pass of the graph that recorded ``loss``."""
    if not isinstance(loss, Tensor) or loss.node is None:
        raise ContractError("backward: loss was not recorded on a graph")
    return loss.node.graph.backward(loss)


def _tracked(t):
    return t.requires_grad or t.node is not None


def _maybe_record(inputs, out, backward_fn):
    graph = active_graph()
    if graph is not None and any(_tracked(t) for t in inputs):
        graph._record(inputs, out, backward_fn)
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _maybe_record([a, b], out, bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def bw(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _maybe_record([a, b], out, bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _maybe_record([a, b], out, bw)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if np.any(b.data == 0.0):
        raise NumericError("div: zero denominator")
    out = Tensor(a.data / b.data)
    ad, bd = a.data, b.data

    def bw(g):
        da = _unbroadcast(g / bd, ad.shape)
        db = _unbroadcast(-g * ad / (bd * bd), bd.shape)
        return da, db

    return _maybe_record([a, b], out, bw)


def scale(a, c):
    c = float(c)
    out = Tensor(a.data * c)

    def bw(g):
        return (g * c,)

    return _maybe_record([a], out, bw)


def abs_(a):
    out = Tensor(np.abs(a.data))
    s = np.sign(a.data)

    def bw(g):
        return (g * s,)

    return _maybe_record([a], out, bw)


def exp(a):
    out = Tensor(np.exp(a.data))
    od = out.data

    def bw(g):
        return (g * od,)

    return _maybe_record([a], out, bw)


def log(a):
    if np.any(a.data <= 0.0):
        raise NumericError("log: input must be strictly positive")
    out = Tensor(np.log(a.data))
    ad = a.data

    def bw(g):
        return (g / ad,)

    return _maybe_record([a], out, bw)


def sqrt(a):
    if np.any(a.data < 0.0):
        raise NumericError("sqrt: input must be non-negative")
    out = Tensor(np.sqrt(a.data))
    od = out.data

    def bw(g):
        return (g * (0.5 / od),)

    return _maybe_record([a], out, bw)


def gelu(a):
    """Elementwise x * Phi(x) using the exact error-function form."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * phi)
    dens = np.exp(-0.5 * x * x) * _INV_SQRT2PI

    def bw(g):
        return (g * (phi + x * dens),)

    return _maybe_record([a], out, bw)


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))
    orig = a.data.shape

    def bw(g):
        return (g.reshape(orig),)

    return _maybe_record([a], out, bw)


def transpose(a, axes):
    axes = tuple(axes)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _maybe_record([a], out, bw)


def slice_axis(a, axis, start, stop):
    """Contiguous slice [start:stop) along one axis."""
    n = a.data.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice_axis: [{start}:{stop}) invalid for axis of length {n}")
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = Tensor(np.ascontiguousarray(a.data[index]))
    full_shape = a.data.shape

    def bw(g):
        dx = np.zeros(full_shape)
        dx[index] = g
        return (dx,)

    return _maybe_record([a], out, bw)


def concat(parts, axis):
    parts = list(parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        grads = []
        for i in range(len(sizes)):
            index = [slice(None)] * g.ndim
            index[axis] = slice(bounds[i], bounds[i + 1])
            grads.append(np.ascontiguousarray(g[tuple(index)]))
        return grads

    return _maybe_record(parts, out, bw)


def roll_axis(a, shift, axis):
    """Cyclic roll along one axis, built from slice + concat."""
    n = a.data.shape[axis]
    s = shift % n
    if s == 0:
        return a
    tail = slice_axis(a, axis, n - s, n)
    head = slice_axis(a, axis, 0, n - s)
    return concat([tail, head], axis)


def take_rows(a, indices):
    """Gather rows of a 2-D tensor: out[i] = a[indices[i]]."""
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    out = Tensor(a.data[idx])
    full_shape = a.data.shape

    def bw(g):
        dx = np.zeros(full_shape)
        np.add.at(dx, idx, g)
        return (dx,)

    return _maybe_record([a], out, bw)


def reduce_sum(a, axis=None, keepdims=False):
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims))
    shape = a.data.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _maybe_record([a], out, bw)


def reduce_mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a, b):
    """Matrix product; 2-D x 2-D, batched x batched (equal leading dims),
    or batched x 2-D (shared right operand, as in a linear layer)."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-D, got {ad.shape} x {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree, {ad.shape} x {bd.shape}")
    shared_rhs = bd.ndim == 2 and ad.ndim > 2
    if not shared_rhs and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions disagree, {ad.shape} x {bd.shape}")
    out = Tensor(np.matmul(ad, bd))

    def bw(g):
        da = np.matmul(g, np.swapaxes(bd, -1, -2))
        if shared_rhs:
            k, n = bd.shape
            db = np.matmul(ad.reshape(-1, k).T, g.reshape(-1, n))
        else:
            db = np.matmul(np.swapaxes(ad, -1, -2), g)
        return da, db

    return _maybe_record([a, b], out, bw)


def linear(x, weight, bias):
    """x @ weight + bias, broadcasting bias over all leading axes."""
    return add(matmul(x, weight), bias)


# ---------------------------------------------------------------------------
# normalization / attention primitives
# ---------------------------------------------------------------------------

def softmax_lastdim(a):
    """Numerically stabilized softmax over the last axis; rows sum to 1."""
    x = a.data
    if x.shape[-1] < 1:
        raise ShapeError("softmax_lastdim: last dimension must be >= 1")
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax_lastdim: non-finite input")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=-1, keepdims=True)
    out = Tensor(y)

    def bw(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return _maybe_record([a], out, bw)


def layernorm(x, gamma, beta, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0.0:
        raise ParameterError(f"layernorm: eps must be > 0, got {eps}")
    c = x.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"layernorm: gamma/beta must have shape ({c},), got "
            f"{gamma.data.shape} and {beta.data.shape}"
        )
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    denom = np.sqrt(var + eps)
    y = xc / denom
    out = Tensor(y * gamma.data + beta.data)
    gd = gamma.data

    def bw(g):
        dbeta = g.reshape(-1, c).sum(axis=0)
        dgamma = (g * y).reshape(-1, c).sum(axis=0)
        dy = g * gd
        m1 = np.mean(dy, axis=-1, keepdims=True)
        m2 = np.mean(dy * y, axis=-1, keepdims=True)
        dx = (dy - m1 - y * m2) / denom
        return dx, dgamma, dbeta

    return _maybe_record([x, gamma, beta], out, bw)


# ---------------------------------------------------------------------------
# depthwise convolution
# ---------------------------------------------------------------------------

def _dw_windows(x4, k, padding):
    xpad = np.pad(x4, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xpad, (k, k), axis=(2, 3))
    return win  # [B, C, H, W, k, k]


def depthwise_conv2d(x, kernels, padding):
    """Per-channel 2-D cross-correlation with same-size zero padding.

    ``x`` is [C, H, W] or [B, C, H, W]; ``kernels`` is [C, k, k] with k odd
    and ``padding == (k - 1) // 2``.  Channel c of the output depends only
    on channel c of the input.
    """
    kd = kernels.data
    if kd.ndim != 3 or kd.shape[1] != kd.shape[2]:
        raise ShapeError(f"depthwise_conv2d: kernels must be [C, k, k], got {kd.shape}")
    k = kd.shape[1]
    if k % 2 == 0:
        raise ParameterError(f"depthwise_conv2d: kernel size must be odd, got {k}")
    if padding != (k - 1) // 2:
        raise ParameterError(
            f"depthwise_conv2d: padding must be (k-1)/2 = {(k - 1) // 2}, got {padding}"
        )
    squeezed = x.data.ndim == 3
    x4 = x.data[None] if squeezed else x.data
    if x4.ndim != 4 or x4.shape[1] != kd.shape[0]:
        raise ShapeError(
            f"depthwise_conv2d: input {x.data.shape} does not match kernels {kd.shape}"
        )
    win = _dw_windows(x4, k, padding)
    y = np.einsum("bchwij,cij->bchw", win, kd)
    out = Tensor(y[0] if squeezed else y)

    def bw(g):
        g4 = g[None] if squeezed else g
        dk = np.einsum("bchwij,bchw->cij", win, g4)
        flipped = kd[:, ::-1, ::-1]
        gwin = _dw_windows(g4, k, padding)
        dx = np.einsum("bchwij,cij->bchw", gwin, flipped)
        return (dx[0] if squeezed else dx), dk

    return _maybe_record([x, kernels], out, bw)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def l1_loss(a, b):
    """Mean absolute difference over all elements."""
    return reduce_mean(abs_(sub(a, b)))


def l2_loss(a, b):
    """Mean squared difference over all elements."""
    d = sub(a, b)
    return reduce_mean(mul(d, d))


def logsumexp_lastdim(a, keepdims=False):
    """Stable log-sum-exp over the last axis (max detached as a constant)."""
    m = np.max(a.data, axis=-1, keepdims=True)
    shifted = sub(a, constant(m))
    s = log(reduce_sum(exp(shifted), axis=-1, keepdims=True))
    res = add(s, constant(m))
    if not keepdims:
        res = reshape(res, a.data.shape[:-1])
    return res
