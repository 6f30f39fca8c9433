"""Small deterministic layer library with explicit backward passes.

Arrays are plain ``numpy.ndarray`` in NCHW layout.  Every layer exposes
``forward(x) -> (y, cache)`` and ``backward(dy, cache) -> dx``; models keep
the caches they produce (their forward tape) and replay them in reverse.
Parameter gradients are accumulated into :class:`Parameter.grad`.

Functional forms (``conv2d``, ``deconv2d`` ...) accept a single ``(C, H, W)``
map as well as a batch.
"""
from __future__ import annotations

from collections import OrderedDict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_DECAY = 0.9


class ShapeError(ValueError):
    """Raised when an input does not conform to a layer's geometry."""


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf reaches a layer boundary or an update."""


class Parameter:
    """A trainable array with its gradient and SGD momentum buffer."""

    def __init__(self, data, name=""):
        self.data = np.asarray(data)
        self.grad = np.zeros_like(self.data)
        self.momentum = np.zeros_like(self.data)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def check_finite(x, where):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values at {where}")
    return x


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got shape {x.shape}")


# ----------------------------------------------------------------------------
# im2col helpers
# ----------------------------------------------------------------------------

def _im2col(xp, kh, kw, stride, ho, wo):
    """(N,C,Hp,Wp) -> (N, C*kh*kw, ho*wo)."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)


def _col2im(cols, shape, kh, kw, stride, ho, wo):
    """Adjoint of :func:`_im2col`; sums overlapping contributions."""
    n, c, hp, wp = shape
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return out


# ----------------------------------------------------------------------------
# functional ops
# ----------------------------------------------------------------------------

def conv2d_forward(x, w, b, stride=1, padding=0):
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    if c != cin:
        raise ShapeError(f"conv2d: input channels {c} != kernel input channels {cin}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp:
        raise ShapeError(f"conv2d: kernel height {kh} exceeds padded input height {hp}")
    if kw > wp:
        raise ShapeError(f"conv2d: kernel width {kw} exceeds padded input width {wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = np.matmul(w.reshape(cout, -1), cols).reshape(n, cout, ho, wo)
    if b is not None:
        out += b.reshape(1, -1, 1, 1)
    return out, (cols, xp.shape, w, stride, padding, (ho, wo))


def conv2d_backward(dout, cache):
    cols, xp_shape, w, stride, padding, (ho, wo) = cache
    n = dout.shape[0]
    cout, cin, kh, kw = w.shape
    d = dout.reshape(n, cout, ho * wo)
    dw = np.tensordot(d, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    db = d.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(cout, -1).T, d)
    dxp = _col2im(dcols, xp_shape, kh, kw, stride, ho, wo)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp, dw, db


def deconv2d_forward(x, w, b, stride=1, padding=0):
    """Transposed convolution; ``w`` has shape (C_in, C_out, kH, kW)."""
    n, c, h, wd = x.shape
    cin, cout, kh, kw = w.shape
    if c != cin:
        raise ShapeError(f"deconv2d: input channels {c} != kernel input channels {cin}")
    if stride < 1:
        raise ShapeError(f"deconv2d: stride must be >= 1, got {stride}")
    hf = (h - 1) * stride + kh
    wf = (wd - 1) * stride + kw
    if hf - 2 * padding < 1 or wf - 2 * padding < 1:
        raise ShapeError(f"deconv2d: padding {padding} leaves an empty output")
    xm = x.reshape(n, cin, h * wd)
    cols = np.matmul(w.reshape(cin, -1).T, xm)
    full = _col2im(cols, (n, cout, hf, wf), kh, kw, stride, h, wd)
    out = full[:, :, padding : hf - padding, padding : wf - padding]
    if b is not None:
        out = out + b.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out), (xm, w, stride, padding, (h, wd), (hf, wf))


def deconv2d_backward(dout, cache):
    xm, w, stride, padding, (h, wd), (hf, wf) = cache
    n = dout.shape[0]
    cin, cout, kh, kw = w.shape
    full = np.pad(dout, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else dout
    dcols = _im2col(full, kh, kw, stride, h, wd)
    dx = np.matmul(w.reshape(cin, -1), dcols).reshape(n, cin, h, wd)
    dw = np.tensordot(xm, dcols, axes=([0, 2], [0, 2])).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3))
    return dx, dw, db


def maxpool2x2_forward(x):
    n, c, h, w = x.shape
    if h % 2:
        raise ShapeError(f"maxpool2x2: odd height {h}")
    if w % 2:
        raise ShapeError(f"maxpool2x2: odd width {w}")
    r = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    # argmax picks the first maximum, i.e. row-major tie-breaking inside the window
    idx = r.argmax(axis=-1)
    out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2x2_backward(dout, cache):
    idx, shape = cache
    n, c, h, w = shape
    r = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(r, idx[..., None], dout[..., None], axis=-1)
    return r.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train=True,
                      eps=BN_EPS, decay=BN_DECAY):
    """Per-channel normalisation over (N, H, W).

    In train mode the running statistics (updated in place) track the batch
    statistics with an exponential moving average.
    """
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = x.size // x.shape[1]
        running_mean *= decay
        running_mean += (1 - decay) * mean
        running_var *= decay
        running_var += (1 - decay) * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
    out = xhat * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)
    return out, (xhat, inv, gamma, train)


def batchnorm_backward(dout, cache):
    xhat, inv, gamma, train = cache
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma.reshape(1, -1, 1, 1)
    if not train:
        return dxhat * inv.reshape(1, -1, 1, 1), dgamma, dbeta
    m = dout.size // dout.shape[1]
    s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
    dx = inv.reshape(1, -1, 1, 1) / m * (m * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


def sigmoid_fn(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def conv2d(x, params, stride=1, padding=0):
    x, single = _as_batch(x)
    y, _ = conv2d_forward(x, params.weight.data, params.bias.data, stride, padding)
    return y[0] if single else y


def deconv2d(x, params, stride=1, padding=0):
    x, single = _as_batch(x)
    y, _ = deconv2d_forward(x, params.weight.data, params.bias.data, stride, padding)
    return y[0] if single else y


def maxpool2x2(x):
    """Return the pooled map and the flat in-window argmax indices."""
    x, single = _as_batch(x)
    y, (idx, _) = maxpool2x2_forward(x)
    return (y[0], idx[0]) if single else (y, idx)


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    return sigmoid_fn(np.asarray(x, dtype=float))


def concat_channels(a, b):
    if a.shape[-2:] != b.shape[-2:]:
        raise ShapeError(f"concat: spatial extents differ, {a.shape[-2:]} vs {b.shape[-2:]}")
    if a.ndim != b.ndim or a.shape[:-3] != b.shape[:-3]:
        raise ShapeError(f"concat: batch layouts differ, {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=-3)


# ----------------------------------------------------------------------------
# layers
# ----------------------------------------------------------------------------

class Layer:
    """Base: a named bag of parameters plus forward/backward."""

    def parameters(self):
        return []

    def buffers(self):
        return []


def kaiming(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Layer):
    def __init__(self, cin, cout, k, rng, stride=1, padding=0, name="conv", dtype=np.float64):
        self.stride, self.padding = stride, padding
        self.weight = Parameter(kaiming(rng, (cout, cin, k, k), cin * k * k, dtype), f"{name}.weight")
        self.bias = Parameter(np.zeros(cout, dtype=dtype), f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        return conv2d_forward(x, self.weight.data, self.bias.data, self.stride, self.padding)

    def backward(self, dout, cache):
        dx, dw, db = conv2d_backward(dout, cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class Deconv2d(Layer):
    def __init__(self, cin, cout, k, rng, stride=1, padding=0, name="deconv", dtype=np.float64):
        self.stride, self.padding = stride, padding
        # each output pixel receives (cin * k * k / stride**2) contributions
        fan = max(cin * k * k // (stride * stride), 1)
        self.weight = Parameter(kaiming(rng, (cin, cout, k, k), fan, dtype), f"{name}.weight")
        self.bias = Parameter(np.zeros(cout, dtype=dtype), f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        return deconv2d_forward(x, self.weight.data, self.bias.data, self.stride, self.padding)

    def backward(self, dout, cache):
        dx, dw, db = deconv2d_backward(dout, cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class BatchNorm2d(Layer):
    def __init__(self, c, name="bn", dtype=np.float64):
        self.gamma = Parameter(np.ones(c, dtype=dtype), f"{name}.gamma")
        self.beta = Parameter(np.zeros(c, dtype=dtype), f"{name}.beta")
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        self.name = name
        self.train = True

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [(f"{self.name}.running_mean", self.running_mean),
                (f"{self.name}.running_var", self.running_var)]

    def forward(self, x):
        return batchnorm_forward(x, self.gamma.data, self.beta.data,
                                 self.running_mean, self.running_var, self.train)

    def backward(self, dout, cache):
        dx, dg, db = batchnorm_backward(dout, cache)
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


class ReLU(Layer):
    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, dout, mask):
        return dout * mask


class Sigmoid(Layer):
    def forward(self, x):
        y = sigmoid_fn(x)
        return y, y

    def backward(self, dout, y):
        return dout * y * (1 - y)


class MaxPool2x2(Layer):
    def forward(self, x):
        return maxpool2x2_forward(x)

    def backward(self, dout, cache):
        return maxpool2x2_backward(dout, cache)


class Sequential(Layer):
    """Chain of layers; the cache is the list of per-layer caches."""

    def __init__(self, *layers):
        self.layers = list(layers)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self):
        return [b for layer in self.layers for b in layer.buffers()]

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, dout, caches):
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dout = layer.backward(dout, c)
        return dout


# ----------------------------------------------------------------------------
# optimisation
# ----------------------------------------------------------------------------

def named_parameters(model):
    return OrderedDict((p.name, p) for p in model.parameters())


def zero_grad(params):
    for p in params:
        p.zero_grad()


def sgd_momentum_step(params, lr, momentum):
    """One SGD step with momentum: ``s = p*s - lr*g; w += s``.

    All gradients are validated before any parameter is touched, so a bad
    gradient leaves the model intact.
    """
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in {p.name or 'unnamed parameter'}")
        if p.grad.shape != p.data.shape:
            raise ShapeError(f"gradient shape {p.grad.shape} != parameter shape {p.data.shape} ({p.name})")
    for p in params:
        p.momentum *= momentum
        p.momentum -= lr * p.grad
        p.data += p.momentum
    return params
