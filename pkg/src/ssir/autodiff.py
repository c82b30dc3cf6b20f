"""A small define-by-run reverse-mode autodiff engine on numpy arrays.

Every op builds a new :class:`Tensor` holding its parents and a closure that
pushes the output gradient back into them. :meth:`Tensor.backward` walks the
recorded graph in reverse topological order. Only the ops the recognizer
needs are provided; broadcasting is supported for elementwise arithmetic.
"""
from __future__ import annotations

import numpy as np

from .errors import InvalidParameterError, NumericsError, ShapeError

DTYPE = np.float64

_debug = False


def set_debug(flag):
    """Enable checked numerics: every op raises NumericsError on NaN/Inf."""
    global _debug
    _debug = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), op=""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.op = op

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise InvalidParameterError(f"backward needs a scalar loss, got shape {self.shape}")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # intermediate grads are not needed once propagated
                    node.grad = None if not node.requires_grad else node.grad

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t, g):
    if not (t.requires_grad or t._parents):
        return
    if t.grad is None:
        # grads are never updated in place, so sharing the buffer is safe
        t.grad = np.asarray(g, dtype=DTYPE)
    else:
        t.grad = t.grad + g


def _node(data, parents, op, backward):
    if _debug and not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values produced by {op}")
    live = tuple(p for p in parents if p.requires_grad or p._parents)
    out = Tensor(data, _parents=live, op=op)
    if live:
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, d in enumerate(shape):
        if d == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))
    return _node(a.data + b.data, (a, b), "add", bw)


def neg(a):
    return _node(-a.data, (a,), "neg", lambda g: _accum(a, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))
    return _node(a.data * b.data, (a, b), "mul", bw)


def relu(a):
    mask = a.data > 0
    return _node(a.data * mask, (a,), "relu", lambda g: _accum(a, g * mask))


def log(a):
    return _node(np.log(a.data), (a,), "log", lambda g: _accum(a, g / a.data))


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), "exp", lambda g: _accum(a, g * out))


def tanh(a):
    out = np.tanh(a.data)
    return _node(out, (a,), "tanh", lambda g: _accum(a, g * (1 - out * out)))


def dropout(a, p, rng, train=True):
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not train or p == 0:
        return a
    if not 0 <= p < 1:
        raise InvalidParameterError(f"dropout probability must be in [0, 1), got {p}")
    # 16-bit uniform draws; survivors are rescaled by the exact keep rate
    cut = int(round(p * 65536))
    bits = np.frombuffer(rng.bytes(2 * a.data.size), dtype=np.uint16).reshape(a.shape)
    mask = (bits >= cut) * (65536.0 / (65536 - cut))
    return _node(a.data * mask, (a,), "dropout", lambda g: _accum(a, g * mask))


# ---------------------------------------------------------------------------
# shape ops


def tsum(a, axis=None, keepdims=False):
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))
    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", bw)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _node(out, (a,), "reshape", lambda g: _accum(a, g.reshape(a.shape)))


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), "transpose",
                 lambda g: _accum(a, g.transpose(inv)))


def _is_basic(idx):
    idx = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in idx)


def getitem(a, idx):
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        _accum(a, full)
    return _node(a.data[idx], (a,), "slice", bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    edges = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, edges[:-1], edges[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])
    return _node(out, tuple(tensors), "concat", bw)


def expand(a, shape):
    """Broadcast ``a`` to ``shape`` (gradient sums over the broadcast axes)."""
    out = np.broadcast_to(a.data, shape).copy()
    return _node(out, (a,), "expand", lambda g: _accum(a, _unbroadcast(g, a.shape)))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))
    return _node(a.data @ b.data, (a, b), "matmul", bw)


def linear(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x``; fused to keep the graph small."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        _accum(w, x2.T @ g2)
        if b is not None:
            _accum(b, g2.sum(axis=0))
        _accum(x, (g2 @ w.data.T).reshape(x.shape))
    parents = (x, w) if b is None else (x, w, b)
    return _node(out.reshape(lead + (w.shape[1],)), parents, "linear", bw)


def conv1d(x, w, b=None, stride=1, padding=0):
    """1-D convolution over time. ``x``: [B, T, Cin]; ``w``: [Cout, Cin, K]."""
    bsz, t, cin = x.shape
    cout, wcin, k = w.shape
    if wcin != cin:
        raise ShapeError(f"conv1d: input {x.shape} does not match kernel {w.shape}")
    if t + 2 * padding < k:
        raise ShapeError(f"conv1d: sequence length {t} shorter than kernel {k}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0)))
    t_out = (t + 2 * padding - k) // stride + 1
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)[:, ::stride][:, :t_out]
    cols = cols.reshape(bsz * t_out, cin * k)  # copies; ordering (cin, k)
    wmat = w.data.reshape(cout, cin * k)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g.reshape(bsz * t_out, cout)
        _accum(w, (g2.T @ cols).reshape(w.shape))
        if b is not None:
            _accum(b, g2.sum(axis=0))
        if x.requires_grad or x._parents:
            dcols = (g2 @ wmat).reshape(bsz, t_out, cin, k)
            dxp = np.zeros_like(xp)
            for j in range(k):
                dxp[:, j:j + stride * (t_out - 1) + 1:stride, :] += dcols[..., j]
            _accum(x, dxp[:, padding:padding + t, :])
    parents = (x, w) if b is None else (x, w, b)
    return _node(out.reshape(bsz, t_out, cout), parents, "conv1d", bw)


# ---------------------------------------------------------------------------
# normalization and softmax


def batchnorm1d(x, gamma, beta, running_mean, running_var, train, momentum=0.1, eps=1e-5):
    """Batch norm over every axis but the last. Running stats update in place."""
    axes = tuple(range(x.ndim - 1))
    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        n = x.data.size // x.shape[-1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        _accum(gamma, (g * xhat).sum(axis=axes))
        _accum(beta, g.sum(axis=axes))
        gx = g * gamma.data
        if train:
            gx = inv * (gx - gx.mean(axis=axes) - xhat * (gx * xhat).mean(axis=axes))
        else:
            gx = gx * inv
        _accum(x, gx)
    return _node(out, (x, gamma, beta), "batchnorm1d", bw)


def layernorm(x, gamma, beta, eps=1e-5):
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        _accum(gamma, (g * xhat).sum(axis=lead))
        _accum(beta, g.sum(axis=lead))
        gx = g * gamma.data
        _accum(x, inv * (gx - gx.mean(axis=-1, keepdims=True)
                         - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))
    return _node(out, (x, gamma, beta), "layernorm", bw)


def softmax(a, axis=-1, mask=None):
    """Softmax along ``axis``; ``mask`` (bool, broadcastable) zeroes disallowed entries."""
    # one working buffer, updated in place
    out = np.where(mask, a.data, -np.inf) if mask is not None else np.array(a.data, dtype=DTYPE)
    out -= out.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def bw(g):
        ga = g - (g * out).sum(axis=axis, keepdims=True)
        ga *= out
        _accum(a, ga)
    return _node(out, (a,), "softmax", bw)


def log_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        _accum(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))
    return _node(out, (a,), "log_softmax", bw)


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under ``logits`` [N, K]."""
    targets = np.asarray(targets, dtype=np.int64)
    ls = log_softmax(logits, axis=-1)
    picked = ls[np.arange(len(targets)), targets]
    return neg(mean(picked))


def custom_op(value, parent, vjp, op="custom"):
    """Wrap an externally computed ``value`` of ``parent`` into the graph.

    ``vjp(g)`` must return the gradient w.r.t. ``parent`` given the output
    gradient ``g``.
    """
    return _node(np.asarray(value, dtype=DTYPE), (parent,), op,
                 lambda g: _accum(parent, vjp(g)))


# ---------------------------------------------------------------------------
# checking


def grad_check(f, x, h=1e-5, coords=None):
    """Max relative error between autodiff and central differences.

    ``f`` maps a Tensor to a scalar Tensor. The error for one coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``. ``coords``
    optionally restricts the probe to a list of flat indices.
    """
    x.requires_grad = True
    x.grad = None
    f(x).backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    idxs = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idxs:
        old = flat[i]
        flat[i] = old + h
        fp = float(f(x).data)
        flat[i] = old - h
        fm = float(f(x).data)
        flat[i] = old
        num = (fp - fm) / (2 * h)
        ana = analytic.reshape(-1)[i]
        worst = max(worst, abs(ana - num) / max(1.0, abs(ana), abs(num)))
    return worst
