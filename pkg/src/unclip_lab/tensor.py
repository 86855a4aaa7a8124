"""Minimal reverse-mode autodiff on float32 numpy arrays.

Every op builds a graph node only when some input carries gradient
information, so forward passes through fully frozen subnetworks cost
nothing extra. Gradients are accumulated in a fixed (construction)
order, which keeps results bit-reproducible run to run.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

DTYPE = np.float32


@contextmanager
def default_dtype(dtype):
    """Temporarily change the engine's default dtype (gradient checking only)."""
    global DTYPE
    prev = DTYPE
    DTYPE = dtype
    try:
        yield
    finally:
        DTYPE = prev


class AutogradError(Exception):
    pass


class Node:
    """Backpointer from an output tensor to the op that produced it."""

    __slots__ = ("parents", "backward_fn")

    def __init__(self, parents, backward_fn):
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # convenience operators
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return mul(self, _lift(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DTYPE))


def _tracked(parents):
    return any(p.requires_grad or p.node is not None for p in parents)


def _make(out_data, parents, backward_fn):
    out = Tensor(out_data)
    if _tracked(parents):
        out.node = Node(tuple(parents), backward_fn)
    return out


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.astype(DTYPE, copy=False)


def backward(root, params=None):
    """Reverse-mode sweep from a scalar root.

    Populates .grad on every reachable requires_grad tensor and returns a
    map id(tensor) -> gradient array. Tensors listed in `params` that the
    graph never reaches get explicit zero gradients. The graph is freed
    afterwards; a second backward needs a fresh forward pass.
    """
    if not isinstance(root, Tensor):
        raise AutogradError("backward root must be a Tensor")
    if root.data.size != 1:
        raise AutogradError(f"backward root must be scalar, got shape {root.data.shape}")

    # post-order DFS, iterative to survive deep graphs
    topo = []
    state = {}
    stack = [root]
    while stack:
        t = stack[-1]
        tid = id(t)
        if state.get(tid) == 2:
            stack.pop()
            continue
        if state.get(tid) == 1:
            state[tid] = 2
            topo.append(t)
            stack.pop()
            continue
        state[tid] = 1
        if t.node is not None:
            for p in t.node.parents:
                if state.get(id(p), 0) == 0:
                    stack.append(p)

    grads = {id(root): np.ones_like(root.data)}
    result = {}
    for t in reversed(topo):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g
            result[id(t)] = t.grad
        if t.node is not None:
            pgrads = t.node.backward_fn(g)
            for p, pg in zip(t.node.parents, pgrads):
                if pg is None or not (p.requires_grad or p.node is not None):
                    continue
                pid = id(p)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg

    for t in topo:
        t.node = None

    if params is not None:
        for p in params:
            if id(p) not in result:
                p.grad = np.zeros_like(p.data)
                result[id(p)] = p.grad
    return result


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _lift(a), _lift(b)

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _lift(a), _lift(b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bw)


def matmul(a, b):
    if a.data.ndim < 1 or b.data.ndim < 2:
        raise AutogradError("matmul expects at least 1-D @ 2-D operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise AutogradError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _make(np.matmul(a.data, b.data), (a, b), bw)


def power(a, exponent):
    exponent = float(exponent)

    def bw(g):
        return (g * exponent * np.power(a.data, exponent - 1.0),)

    return _make(np.power(a.data, exponent), (a,), bw)


def log(a):
    def bw(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), bw)


def exp(a):
    out_data = np.exp(a.data)

    def bw(g):
        return (g * out_data,)

    return _make(out_data, (a,), bw)


def tsum(a, axis=None, keepdims=False):
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(DTYPE),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).astype(DTYPE),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims, dtype=DTYPE), (a,), bw)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]

    def bw(g):
        if axis is None:
            return ((np.broadcast_to(g, a.data.shape) / n).astype(DTYPE),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((np.broadcast_to(gg, a.data.shape) / n).astype(DTYPE),)

    return _make(a.data.mean(axis=axis, keepdims=keepdims, dtype=DTYPE), (a,), bw)


def reshape(a, shape):
    def bw(g):
        return (g.reshape(a.data.shape),)

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a, axes):
    inv = np.argsort(axes)

    def bw(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(axes), (a,), bw)


def concat(tensors, axis):
    tensors = [_lift(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def slice_axis(a, axis, start, length):
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        out = np.zeros_like(a.data)
        out[idx] = g
        return (out,)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), bw)


def broadcast_to(a, shape):
    def bw(g):
        return (_unbroadcast(g, a.data.shape),)

    return _make(np.broadcast_to(a.data, shape).astype(DTYPE), (a,), bw)


def softmax(a, axis=-1):
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    s = (e / e.sum(axis=axis, keepdims=True)).astype(DTYPE)

    def bw(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _make(s, (a,), bw)


def silu(a):
    sig = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return _make(a.data * sig, (a,), bw)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalization over the last axis with learned scale/shift."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True, dtype=DTYPE)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True, dtype=DTYPE)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=reduce_axes).astype(DTYPE)
        dbeta = g.sum(axis=reduce_axes).astype(DTYPE)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True, dtype=DTYPE)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True, dtype=DTYPE)
        dx = (inv * (dxhat - m1 - xhat * m2)).astype(DTYPE)
        return dx, dgamma, dbeta

    return _make((xhat * gamma.data + beta.data).astype(DTYPE), (a, gamma, beta), bw)


def embedding(table, ids):
    ids = np.asarray(ids)

    def bw(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    return _make(table.data[ids], (table,), bw)


def l2_normalize(a, axis=-1, eps=1e-12):
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True) + eps).astype(DTYPE)
    y = a.data / norm

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - y * dot) / norm,)

    return _make(y, (a,), bw)


def _im2col(x, kh, kw):
    n, c, h, w = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    s = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x, (n, c, kh, kw, oh, ow), (s[0], s[1], s[2], s[3], s[2], s[3]))
    return np.ascontiguousarray(cols).reshape(n, c * kh * kw, oh * ow)


def _col2im(cols, xshape, kh, kw):
    n, c, h, w = xshape
    oh, ow = h - kh + 1, w - kw + 1
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros(xshape, dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + oh, j:j + ow] += cols[:, :, i, j]
    return out


def conv2d(x, w, padding="same"):
    """2-D convolution, stride 1, NCHW input and OIHW weights."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise AutogradError("conv2d expects 4-D input and weights")
    if x.data.shape[1] != w.data.shape[1]:
        raise AutogradError(
            f"conv2d channel mismatch: input {x.data.shape} weights {w.data.shape}")
    kh, kw = w.data.shape[2], w.data.shape[3]
    if padding == "same":
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        if kh % 2 == 0 or kw % 2 == 0:
            raise AutogradError("same padding needs odd kernel sizes")
    elif padding == "valid":
        ph = pw = 0
    else:
        raise AutogradError(f"unknown padding {padding!r}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    n = xp.shape[0]
    oh, ow = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    cols = _im2col(xp, kh, kw)                       # (n, c*kh*kw, oh*ow)
    wmat = w.data.reshape(w.data.shape[0], -1)       # (o, c*kh*kw)
    out = np.matmul(wmat, cols).reshape(n, w.data.shape[0], oh, ow)

    def bw(g):
        gm = g.reshape(n, w.data.shape[0], oh * ow)
        dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        dcols = np.matmul(wmat.T, gm)
        dxp = _col2im(dcols, xp.shape, kh, kw)
        if ph or pw:
            dxp = dxp[:, :, ph:dxp.shape[2] - ph, pw:dxp.shape[3] - pw]
        return np.ascontiguousarray(dxp), dw.astype(DTYPE)

    return _make(out.astype(DTYPE), (x, w), bw)


def avg_pool2(x):
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise AutogradError(f"avg_pool2 needs even spatial dims, got {(h, w)}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5), dtype=DTYPE)

    def bw(g):
        return ((np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0).astype(DTYPE),)

    return _make(out, (x,), bw)


def upsample2(x):
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        n, c, h, w = g.shape
        return (g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)).astype(DTYPE),)

    return _make(out, (x,), bw)


def attention(q, k, v):
    """Scaled dot-product attention over (..., T, d) heads, composed from primitives."""
    d = q.data.shape[-1]
    ndim = q.data.ndim
    axes = tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)
    scores = mul(matmul(q, transpose(k, axes)), _lift(1.0 / np.sqrt(d)))
    return matmul(softmax(scores, axis=-1), v)


def sinusoidal_embedding(t, dim):
    """Non-learned timestep embedding; half sines, half cosines, log-spaced."""
    t = np.asarray(t, dtype=DTYPE).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=DTYPE) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(DTYPE)
