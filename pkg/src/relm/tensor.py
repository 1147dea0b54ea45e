"""Array values with reverse-mode gradients for the handful of ops the models use.

Every op takes and returns :class:`Tensor` objects wrapping numpy arrays. When
any input requires a gradient (and recording is enabled), the result keeps a
reference to its inputs and a closure that maps the output gradient to input
gradients. :meth:`Tensor.backward` replays those closures in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import erf

from .errors import ShapeError

_recording = True

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (decoding, evaluation)."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


def is_recording() -> bool:
    return _recording


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return total(self)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable trainable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = _topo_order(self)
        for node in order:
            if node._backward is not None:
                node.grad = None
        _accumulate(self, np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in order:
            if node._backward is not None:
                node.grad = None


class Parameter(Tensor):
    """A named leaf tensor owned by a model.

    ``trainable`` doubles as ``requires_grad``: frozen parameters never receive
    gradient and keep an all-zero ``grad`` buffer.
    """

    __slots__ = ("name",)

    def __init__(self, data, name="", trainable=True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def trainable(self):
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag):
        self.requires_grad = bool(flag)
        if not flag:
            self.grad[...] = 0

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def _topo_order(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if isinstance(t, Parameter):
        t.grad += g
    elif t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _result(data, parents, backward):
    out = Tensor(data)
    if _recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ----------------------------------------------------------------- elementwise


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(data, (a, b), backward)


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        s = float(b)
        return _result(a.data * a.data.dtype.type(s), (a,), lambda g: _accumulate(a, g * a.data.dtype.type(s)))
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), backward)


_ERF_COEF = tuple(np.float32(c) for c in (1.061405429, -1.453152027, 1.421413741, -0.284496736, 0.254829592))
_ERF_P = np.float32(0.3275911)


def _erf32(x):
    # Rational approximation with |error| < 6e-7, i.e. at float32 resolution,
    # and about three times cheaper than scipy's erf on float32 input.
    a = np.abs(x)
    t = a * _ERF_P
    t += 1
    np.reciprocal(t, out=t)
    c0, c1, c2, c3, c4 = _ERF_COEF
    p = t * c0
    for c in (c1, c2, c3, c4):
        p += c
        p *= t
    np.square(a, out=a)
    np.negative(a, out=a)
    np.exp(a, out=a)
    p *= a
    np.subtract(1, p, out=p)
    return np.copysign(p, x, out=p)


def gaussian_cdf(x: np.ndarray) -> np.ndarray:
    if x.dtype == np.float32:
        cdf = _erf32(x * np.float32(1 / _SQRT2))
    else:
        cdf = erf(x / _SQRT2)
    cdf += 1
    cdf *= 0.5
    return cdf


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    xd = x.data
    cdf = gaussian_cdf(xd)
    data = (xd * cdf).astype(xd.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        _accumulate(x, (g * (cdf + xd * pdf)).astype(xd.dtype, copy=False))

    return _result(data, (x,), backward)


# ------------------------------------------------------------------ structural


def matmul(a, b):
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape)
    data = np.matmul(a.data, b.data)

    def backward(g):
        if b.ndim == 2:
            if a.requires_grad:
                _accumulate(a, g @ b.data.T)
            if b.requires_grad:
                k = a.shape[-1]
                _accumulate(b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            return
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(data, (a, b), backward)


def linear(x, w, b):
    """``x @ w + b`` for a 2-D weight, computed on the flattened leading axes."""
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError("linear", x.shape, w.shape, b.shape)
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    data = (x2 @ w.data + b.data).reshape(*lead, w.shape[1])

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        if w.requires_grad:
            _accumulate(w, x2.T @ g2)
        if b.requires_grad:
            _accumulate(b, g2.sum(axis=0))
        if x.requires_grad:
            _accumulate(x, (g2 @ w.data.T).reshape(x.shape))

    return _result(data, (x, w, b), backward)


def attention(x, kv, weights, n_heads, mask=None, keep=None):
    """Multi-head scaled dot-product attention as one graph node.

    ``weights`` is ``(wq, bq, wk, bk, wv, bv, wo, bo)``; queries come from
    ``x`` (B, L, d), keys and values from ``kv`` (B, S, d). ``mask`` is an
    additive array broadcastable to (B, H, L, S) and ``keep`` an optional
    pre-scaled dropout multiplier on the attention probabilities.
    """
    wq, bq, wk, bk, wv, bv, wo, bo = weights
    B, L, d = x.shape
    S = kv.shape[1]
    if kv.shape[0] != B or kv.shape[2] != d or wq.shape != (d, d) or d % n_heads:
        raise ShapeError("attention", x.shape, kv.shape, wq.shape)
    H = n_heads
    dh = d // H
    scale = x.dtype.type(1.0 / math.sqrt(dh))
    x2 = x.data.reshape(-1, d)
    kv2 = x2 if kv is x else kv.data.reshape(-1, d)

    def heads(a, n):
        return a.reshape(B, n, H, dh).transpose(0, 2, 1, 3)

    q = heads(x2 @ wq.data + bq.data, L)
    k = heads(kv2 @ wk.data + bk.data, S)
    v = heads(kv2 @ wv.data + bv.data, S)
    z = q @ k.transpose(0, 1, 3, 2)
    z *= scale
    if mask is not None:
        z += mask
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    p = z
    pd = p if keep is None else p * keep
    ctx = (pd @ v).transpose(0, 2, 1, 3).reshape(-1, d)
    data = (ctx @ wo.data + bo.data).reshape(B, L, d)

    def backward(g):
        g2 = g.reshape(-1, d)
        if wo.requires_grad:
            _accumulate(wo, ctx.T @ g2)
        if bo.requires_grad:
            _accumulate(bo, g2.sum(axis=0))
        gctx = heads(g2 @ wo.data.T, L)
        gp = gctx @ v.transpose(0, 1, 3, 2)
        gv = pd.transpose(0, 1, 3, 2) @ gctx
        if keep is not None:
            gp *= keep
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gs *= scale
        gq = (gs @ k).transpose(0, 2, 1, 3).reshape(-1, d)
        gk = (gs.transpose(0, 1, 3, 2) @ q).transpose(0, 2, 1, 3).reshape(-1, d)
        gv = gv.transpose(0, 2, 1, 3).reshape(-1, d)
        for w_, b_, gh, src in ((wq, bq, gq, x2), (wk, bk, gk, kv2), (wv, bv, gv, kv2)):
            if w_.requires_grad:
                _accumulate(w_, src.T @ gh)
            if b_.requires_grad:
                _accumulate(b_, gh.sum(axis=0))
        if x.requires_grad:
            gx = gq @ wq.data.T
            if kv is x:
                gx += gk @ wk.data.T + gv @ wv.data.T
            _accumulate(x, gx.reshape(x.shape))
        if kv is not x and kv.requires_grad:
            _accumulate(kv, (gk @ wk.data.T + gv @ wv.data.T).reshape(kv.shape))

    return _result(data, (x, kv, *weights), backward)


def reshape(x, shape):
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: _accumulate(x, g.reshape(old)))


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: _accumulate(x, g.transpose(inv)))


def total(x):
    return _result(x.data.sum(), (x,), lambda g: _accumulate(x, np.broadcast_to(g, x.shape).copy()))


def mean(x):
    n = x.data.size
    return mul(total(x), 1.0 / n)


def embedding(weight, ids):
    """Row lookup ``weight[ids]``; gradients scatter-add back into the rows."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError("embedding", weight.shape, (int(ids.max()),))
    data = weight.data[ids]

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        _accumulate(weight, gw)

    return _result(data, (weight,), backward)


def index_rows(x, idx):
    """Select rows of a 2-D tensor."""
    idx = np.asarray(idx)
    data = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _accumulate(x, gx)

    return _result(data, (x,), backward)


# --------------------------------------------------------------- normalization


def layer_norm(x, gain, bias, eps=1e-12):
    if gain.shape != (x.shape[-1],) or bias.shape != gain.shape:
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).sum(axis=lead))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=lead))
        if x.requires_grad:
            dxhat = g * gain.data
            dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, dx)

    return _result(data, (x, gain, bias), backward)


def softmax(x, axis=-1, mask=None):
    """Softmax along ``axis``. ``mask`` is an additive constant (e.g. -1e9 at
    disallowed positions) applied before normalization."""
    z = x.data if mask is None else x.data + mask
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (x,), backward)


def log_softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def dropout(x, p, gen, training=True):
    """Inverted dropout: zero with probability ``p``, scale survivors by 1/(1-p)."""
    if not training or p == 0.0:
        return x
    keep = (gen.random(x.shape) >= p).astype(x.dtype)
    keep *= x.dtype.type(1.0 / (1.0 - p))
    return mul(x, Tensor(keep))


def cross_entropy(logits, targets, ignore_index=-100, label_smoothing=0.0):
    """Mean token cross-entropy over rows whose target is not ``ignore_index``.

    With no valid rows the loss is a zero scalar.
    """
    if logits.ndim != 2 or targets.shape != logits.shape[:1]:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    targets = np.asarray(targets)
    valid = targets != ignore_index
    n = int(valid.sum())
    dtype = logits.dtype
    if n == 0:
        return mul(total(logits), 0.0)
    rows = np.nonzero(valid)[0]
    t = targets[rows]
    logp = log_softmax_np(logits.data[rows])
    nll = -logp[np.arange(n), t]
    if label_smoothing:
        nll = (1.0 - label_smoothing) * nll - label_smoothing * logp.mean(axis=-1)
    loss = np.asarray(nll.sum() / n, dtype=dtype)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), t] -= 1.0 - label_smoothing
        if label_smoothing:
            p -= label_smoothing / logits.shape[1]
        gl = np.zeros_like(logits.data)
        gl[rows] = p * (g / n)
        _accumulate(logits, gl.astype(dtype, copy=False))

    return _result(loss, (logits,), backward)
