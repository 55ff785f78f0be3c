"""Layers with hand-written backward passes (NHWC activations).

Every layer keeps what it needs from ``forward`` for the next ``backward``
call, so one layer instance serves one forward/backward pair at a time.
Parameters and gradients live in ``params``/``grads`` dicts keyed by name.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

GELU_C = math.sqrt(2.0 / math.pi)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def spec(self) -> dict:
        return {"kind": self.kind}


def im2col(x, k, s, p):
    """Patch matrix (n*ho*wo, k*k*c) with columns ordered (ki, kj, c)."""
    n, h, w, c = x.shape
    if p:
        xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
        xp[:, p : p + h, p : p + w, :] = x
    else:
        xp = x
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    cols = np.empty((n, ho, wo, k * k * c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            q = (i * k + j) * c
            cols[..., q : q + c] = xp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :]
    return cols.reshape(n * ho * wo, k * k * c), xp.shape, ho, wo


PLANAR_MAX_C = 8


def im2col_planar(x, k, s, p):
    """Channel-first patch matrix (k*k*c, n*ho*wo); faster than ``im2col`` for small c."""
    n, h, wd, c = x.shape
    xp = np.zeros((c, n, h + 2 * p, wd + 2 * p), dtype=x.dtype)
    xp[:, :, p : p + h, p : p + wd] = x.transpose(3, 0, 1, 2)
    ho = (h + 2 * p - k) // s + 1
    wo = (wd + 2 * p - k) // s + 1
    cols = np.empty((k, k, c, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[i, j] = xp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s]
    return cols.reshape(k * k * c, n * ho * wo), xp.shape, ho, wo


def conv_planar(x, w, b, k, s, p):
    cols, _, ho, wo = im2col_planar(x, k, s, p)
    out = (w.T @ cols).T.reshape(x.shape[0], ho, wo, w.shape[1])
    out += b
    return out


class Conv2d(Layer):
    """3x3-style convolution with 'same' zero padding and optional stride."""

    kind = "conv"

    def __init__(self, c_in, c_out, kernel=3, stride=1, rng=None, dtype=np.float32):
        super().__init__()
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, kernel, stride
        self.pad = kernel // 2
        rng = rng or np.random.default_rng(0)
        fan_in = c_in * kernel * kernel
        self.params["w"] = (rng.standard_normal((fan_in, c_out)) * math.sqrt(2.0 / fan_in)).astype(dtype)
        self.params["b"] = np.zeros(c_out, dtype=dtype)
        self.input_grad = True  # the network's first layer switches this off

    def spec(self):
        return {"kind": self.kind, "c_in": self.c_in, "c_out": self.c_out, "kernel": self.k, "stride": self.stride}

    def forward(self, x, training=False):
        planar = self.c_in <= PLANAR_MAX_C
        if planar:
            cols, xpshape, ho, wo = im2col_planar(x, self.k, self.stride, self.pad)
            out = (self.params["w"].T @ cols).T
        else:
            cols, xpshape, ho, wo = im2col(x, self.k, self.stride, self.pad)
            out = cols @ self.params["w"]
        self._cache = (cols, planar, x.shape, xpshape, ho, wo)
        out += self.params["b"]
        return out.reshape(x.shape[0], ho, wo, self.c_out)

    def backward(self, dout):
        cols, planar, xshape, xpshape, ho, wo = self._cache
        n = xshape[0]
        k, s, p = self.k, self.stride, self.pad
        d2 = dout.reshape(-1, self.c_out)
        self.grads["w"] = (cols @ d2) if planar else (cols.T @ d2)
        self.grads["b"] = np.ones(d2.shape[0], dtype=d2.dtype) @ d2
        if not self.input_grad:
            return None
        if planar:
            dcols = (self.params["w"] @ d2.T).reshape(k, k, self.c_in, n, ho, wo)
            dxp = np.zeros(xpshape, dtype=dout.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[i, j]
            return dxp[:, :, p : p + xshape[1], p : p + xshape[2]].transpose(1, 2, 3, 0)
        dcols = (d2 @ self.params["w"].T).reshape(n, ho, wo, k, k, self.c_in)
        dxp = np.zeros(xpshape, dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += dcols[:, :, :, i, j, :]
        return dxp[:, p : p + xshape[1], p : p + xshape[2], :]


class BatchNorm(Layer):
    """Per-channel normalization over all but the last axis."""

    kind = "batchnorm"

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["var"] = np.ones(channels, dtype=dtype)

    def spec(self):
        return {"kind": self.kind, "channels": self.channels}

    def forward(self, x, training=False):
        c = self.channels
        x2 = x.reshape(-1, c)
        cnt = x2.shape[0]
        ones = np.ones(cnt, dtype=x.dtype)
        if training:
            # channel sums as BLAS products; much faster than axis reductions for small c
            mu = (ones @ x2) / cnt
            xc = x2 - mu
            var = (ones @ (xc * xc)) / cnt
            m = self.momentum
            self.buffers["mean"] = ((1 - m) * self.buffers["mean"] + m * mu).astype(x.dtype)
            self.buffers["var"] = ((1 - m) * self.buffers["var"] + m * var * cnt / max(cnt - 1, 1)).astype(x.dtype)
        else:
            mu, var = self.buffers["mean"], self.buffers["var"]
            xc = x2 - mu
        inv = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = xc * inv
        self._cache = (xhat, inv, training, x.shape)
        return (self.params["gamma"] * xhat + self.params["beta"]).reshape(x.shape)

    def backward(self, dout):
        xhat, inv, training, shape = self._cache
        d2 = dout.reshape(-1, self.channels)
        ones = np.ones(d2.shape[0], dtype=d2.dtype)
        dbeta = ones @ d2
        dgamma = ones @ (d2 * xhat)
        self.grads["gamma"] = dgamma
        self.grads["beta"] = dbeta
        g = self.params["gamma"]
        if not training:
            return (d2 * (g * inv)).reshape(shape)
        m = d2.shape[0]
        # dxhat = d2 * g, so its channel sums are g * dbeta and g * dgamma
        dx = (g * inv / m) * (m * d2 - dbeta - xhat * dgamma)
        return dx.reshape(shape)


class GELU(Layer):
    """tanh approximation of the Gaussian error linear unit."""

    kind = "gelu"

    def forward(self, x, training=False):
        x2 = x * x
        t = np.tanh(GELU_C * x * (1.0 + 0.044715 * x2))
        self._cache = (x, t)
        return 0.5 * x * (1.0 + t)

    def backward(self, dout):
        x, t = self._cache
        dinner = GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return dout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def global_avg(x):
    n, h, w, c = x.shape
    return x.reshape(n, h * w, c).sum(axis=1) / (h * w)


def pool_max(x):
    """2x2/2 max pooling without index bookkeeping."""
    h2, w2 = x.shape[1] // 2, x.shape[2] // 2
    a = np.maximum(x[:, 0 : 2 * h2 : 2, 0 : 2 * w2 : 2], x[:, 0 : 2 * h2 : 2, 1 : 2 * w2 : 2])
    return np.maximum(a, np.maximum(x[:, 1 : 2 * h2 : 2, 0 : 2 * w2 : 2], x[:, 1 : 2 * h2 : 2, 1 : 2 * w2 : 2]), out=a)


def gelu(x):
    t = x * x
    t *= GELU_C * 0.044715
    t += GELU_C
    t *= x
    np.tanh(t, out=t)
    t += 1.0
    t *= x
    t *= 0.5
    return t


class MaxPool2(Layer):
    """2x2 max pooling with stride 2 (odd trailing rows/cols are dropped)."""

    kind = "maxpool"

    def forward(self, x, training=False):
        h2, w2 = x.shape[1] // 2, x.shape[2] // 2
        q = [x[:, i : 2 * h2 : 2, j : 2 * w2 : 2] for i in (0, 1) for j in (0, 1)]
        out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
        # route the gradient to the first maximum in (0,0), (0,1), (1,0), (1,1) order
        taken = q[0] == out
        sel = [taken]
        for k in (1, 2):
            s_k = (q[k] == out) & ~taken
            taken = taken | s_k
            sel.append(s_k)
        sel.append(~taken)
        self._cache = (x.shape, sel)
        return out

    def backward(self, dout):
        shape, sel = self._cache
        h2, w2 = shape[1] // 2, shape[2] // 2
        dx = np.zeros(shape, dtype=dout.dtype)
        for (i, j), s_k in zip(((0, 0), (0, 1), (1, 0), (1, 1)), sel):
            dx[:, i : 2 * h2 : 2, j : 2 * w2 : 2] = dout * s_k
        return dx


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, x, training=False):
        self._shape = x.shape
        return global_avg(x)

    def backward(self, dout):
        n, h, w, c = self._shape
        return np.broadcast_to(dout[:, None, None, :] / (h * w), self._shape).copy()


class Linear(Layer):
    kind = "linear"

    def __init__(self, n_in, n_out, rng=None, dtype=np.float32, gain=2.0):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        rng = rng or np.random.default_rng(0)
        self.params["w"] = (rng.standard_normal((n_in, n_out)) * math.sqrt(gain / n_in)).astype(dtype)
        self.params["b"] = np.zeros(n_out, dtype=dtype)

    def spec(self):
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out}

    def forward(self, x, training=False):
        self._x = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, dout):
        self.grads["w"] = self._x.T @ dout
        self.grads["b"] = dout.sum(axis=0)
        return dout @ self.params["w"].T


_BELOW_ONE = {}


def tanh_open(x):
    """tanh kept strictly inside (-1, 1); float32 tanh rounds to +-1 for |x| > ~9."""
    top = _BELOW_ONE.get(x.dtype)
    if top is None:
        top = _BELOW_ONE[x.dtype] = np.nextafter(np.array(1.0, dtype=x.dtype), 0)
    t = np.tanh(x)
    return np.clip(t, -top, top, out=t)


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x, training=False):
        self._y = tanh_open(x)
        return self._y

    def backward(self, dout):
        return dout * (1.0 - self._y * self._y)


LAYER_KINDS = {cls.kind: cls for cls in (Conv2d, BatchNorm, GELU, MaxPool2, GlobalAvgPool, Linear, Tanh)}
