"""Layer primitives with explicit forward/backward passes.

Activations are float64 and channels-last, (batch, height, width, channels),
so im2col windows and per-channel reductions run over contiguous memory.  The
model converts channels-first input once at its entry.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# im2col matrices larger than this (in float64 elements) are rebuilt in backward instead of cached
_CACHE_LIMIT = 1 << 26
# rows of im2col materialized per matmul when not caching
_CHUNK_ELEMS = 1 << 23


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def config(self) -> dict:
        return {}


def _pad_amount(padding, kernel):
    if padding == "same":
        return (kernel[0] - 1) // 2, kernel[0] // 2, (kernel[1] - 1) // 2, kernel[1] // 2
    if padding == "valid":
        return 0, 0, 0, 0
    p = int(padding)
    return p, p, p, p


def _im2col(xp, kh, kw, stride, ho, wo):
    """(N, Hp, Wp, C) -> (N*ho*wo, kh*kw*C), rows ordered (n, i, j), columns (di, dj, c)."""
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, kh * kw * xp.shape[3])


class Conv2D(Layer):
    """2-D cross-correlation.  Weights are stored (filters, channels, kh, kw)."""

    kind = "conv2d"

    def __init__(self, in_channels, filters, kernel_hw=(3, 3), stride=1, padding="same"):
        super().__init__()
        self.in_channels = int(in_channels)
        self.filters = int(filters)
        self.kernel_hw = tuple(int(k) for k in kernel_hw)
        self.stride = int(stride)
        self.padding = padding
        if padding == "same" and self.stride != 1:
            raise ValueError("same padding requires stride 1")
        kh, kw = self.kernel_hw
        self.params = {
            "W": np.zeros((self.filters, self.in_channels, kh, kw)),
            "b": np.zeros(self.filters),
        }
        self.need_input_grad = True

    def config(self):
        return {"filters": self.filters, "kernel_hw": list(self.kernel_hw), "stride": self.stride,
                "padding": self.padding, "in_channels": self.in_channels}

    def output_shape(self, in_shape):
        h, w, c = in_shape
        if c != self.in_channels:
            raise ValueError(f"conv2d expects {self.in_channels} channels, got {c}")
        pt, pb, pl, pr = _pad_amount(self.padding, self.kernel_hw)
        kh, kw = self.kernel_hw
        ho = (h + pt + pb - kh) // self.stride + 1
        wo = (w + pl + pr - kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"conv2d input {h}x{w} smaller than kernel")
        return ho, wo, self.filters

    def _wmat(self):
        # (kh*kw*C, F) matching the im2col column order
        return self.params["W"].transpose(2, 3, 1, 0).reshape(-1, self.filters)

    def _chunks(self, n, rows_per_item, width):
        step = max(1, _CHUNK_ELEMS // max(1, rows_per_item * width))
        return [slice(i, min(n, i + step)) for i in range(0, n, step)]

    def forward(self, x, training=False, rng=None):
        pt, pb, pl, pr = _pad_amount(self.padding, self.kernel_hw)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else x
        n = x.shape[0]
        ho, wo, _ = self.output_shape(x.shape[1:])
        kh, kw = self.kernel_hw
        wmat = self._wmat()
        width = wmat.shape[0]
        if n * ho * wo * width <= _CACHE_LIMIT:
            cols = _im2col(xp, kh, kw, self.stride, ho, wo)
            out = cols @ wmat
        else:
            cols = None
            out = np.empty((n * ho * wo, self.filters))
            for sl in self._chunks(n, ho * wo, width):
                out[sl.start * ho * wo:sl.stop * ho * wo] = _im2col(xp[sl], kh, kw, self.stride, ho, wo) @ wmat
        out += self.params["b"]
        self._cache = (xp, cols, x.shape, ho, wo)
        return out.reshape(n, ho, wo, self.filters)

    def backward(self, dout):
        xp, cols, x_shape, ho, wo = self._cache
        n = x_shape[0]
        kh, kw = self.kernel_hw
        wmat = self._wmat()
        dflat = dout.reshape(-1, self.filters)
        if cols is not None:
            dw = cols.T @ dflat
        else:
            dw = np.zeros_like(wmat)
            for sl in self._chunks(n, ho * wo, wmat.shape[0]):
                rows = slice(sl.start * ho * wo, sl.stop * ho * wo)
                dw += _im2col(xp[sl], kh, kw, self.stride, ho, wo).T @ dflat[rows]
        self.grads = {
            "W": dw.reshape(kh, kw, self.in_channels, self.filters).transpose(3, 2, 0, 1),
            "b": dflat.sum(axis=0),
        }
        if not self.need_input_grad:
            return None
        if self.stride == 1:
            return self._input_grad_stride1(dout, x_shape)
        return self._input_grad_scatter(dflat, xp, x_shape, ho, wo)

    def _input_grad_stride1(self, dout, x_shape):
        # dx is the full correlation of dout with the spatially flipped, channel-swapped kernel
        kh, kw = self.kernel_hw
        pt, pb, pl, pr = _pad_amount(self.padding, self.kernel_hw)
        n, h, w, c = x_shape
        hp, wp = h + pt + pb, w + pl + pr
        ho, wo = dout.shape[1:3]
        dpad = np.pad(dout, ((0, 0), (kh - 1, hp - ho), (kw - 1, wp - wo), (0, 0)))
        wflip = self.params["W"][:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(-1, c)
        dxp = np.empty((n, hp, wp, c))
        for sl in self._chunks(n, hp * wp, kh * kw * self.filters):
            dxp[sl] = (_im2col(dpad[sl], kh, kw, 1, hp, wp) @ wflip).reshape(-1, hp, wp, c)
        return dxp[:, pt:pt + h, pl:pl + w]

    def _input_grad_scatter(self, dflat, xp, x_shape, ho, wo):
        kh, kw = self.kernel_hw
        s = self.stride
        pt, _, pl, _ = _pad_amount(self.padding, self.kernel_hw)
        dcols = (dflat @ self._wmat().T).reshape(-1, ho, wo, kh, kw, self.in_channels)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, i, j]
        h, w = x_shape[1:3]
        return dxp[:, pt:pt + h, pl:pl + w]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False, rng=None):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class BatchNorm(Layer):
    """Per-channel (last axis) normalization; batch statistics while training."""

    kind = "batchnorm"

    def __init__(self, channels, momentum=0.9, eps=1e-5):
        super().__init__()
        self.channels = int(channels)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.params = {"gamma": np.ones(channels), "beta": np.zeros(channels)}
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def config(self):
        return {"channels": self.channels, "momentum": self.momentum, "eps": self.eps}

    def output_shape(self, in_shape):
        if in_shape[-1] != self.channels:
            raise ValueError(f"batchnorm expects {self.channels} channels, got {in_shape[-1]}")
        return in_shape

    def forward(self, x, training=False, rng=None):
        flat = x.reshape(-1, self.channels)
        if training:
            mean = flat.mean(axis=0)
            var = flat.var(axis=0)
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mean
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (flat - mean) * inv
        self._cache = (xhat, inv, training)
        return (xhat * self.params["gamma"] + self.params["beta"]).reshape(x.shape)

    def backward(self, dout):
        xhat, inv, training = self._cache
        d = dout.reshape(-1, self.channels)
        dgamma = (d * xhat).sum(axis=0)
        dbeta = d.sum(axis=0)
        self.grads = {"gamma": dgamma, "beta": dbeta}
        scale = self.params["gamma"] * inv
        if not training:
            return (d * scale).reshape(dout.shape)
        count = d.shape[0]
        dx = scale * (d - dbeta / count - xhat * (dgamma / count))
        return dx.reshape(dout.shape)


class MaxPool2D(Layer):
    kind = "maxpool"

    def __init__(self, window=2, stride=None):
        super().__init__()
        self.window = int(window)
        self.stride = int(stride or window)

    def config(self):
        return {"window": self.window, "stride": self.stride}

    def output_shape(self, in_shape):
        h, w, c = in_shape
        ho = (h - self.window) // self.stride + 1
        wo = (w - self.window) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"maxpool window {self.window} exceeds input {h}x{w}")
        return ho, wo, c

    def forward(self, x, training=False, rng=None):
        k, s = self.window, self.stride
        ho, wo, c = self.output_shape(x.shape[1:])
        n = x.shape[0]
        if k == s:
            tiles = x[:, :ho * k, :wo * k].reshape(n, ho, k, wo, k, c).transpose(0, 1, 3, 5, 2, 4)
        else:
            tiles = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
        flat = tiles.reshape(n, ho, wo, c, k * k)
        arg = flat.argmax(axis=-1)  # first maximum wins ties
        self._cache = (x.shape, arg)
        return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        x_shape, arg = self._cache
        k, s = self.window, self.stride
        n, ho, wo, c = dout.shape
        if k == s:
            tiles = np.zeros((n, ho, wo, c, k * k))
            np.put_along_axis(tiles, arg[..., None], dout[..., None], axis=-1)
            dx = np.zeros(x_shape)
            dx[:, :ho * k, :wo * k] = tiles.reshape(n, ho, wo, c, k, k).transpose(0, 1, 4, 2, 5, 3).reshape(
                n, ho * k, wo * k, c)
            return dx
        dx = np.zeros(x_shape)
        di, dj = np.divmod(arg, k)
        ni, oi, oj, ci = np.indices((n, ho, wo, c), sparse=True)
        np.add.at(dx, (ni, oi * s + di, oj * s + dj, ci), dout)
        return dx


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by 1/(1-rate) while training."""

    kind = "dropout"

    def __init__(self, rate=0.25):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = float(rate)

    def config(self):
        return {"rate": self.rate}

    def forward(self, x, training=False, rng=None):
        if not training or self.rate == 0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("dropout in training mode needs an rng")
        self._mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, training=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, units):
        super().__init__()
        self.in_features = int(in_features)
        self.units = int(units)
        self.params = {"W": np.zeros((self.in_features, self.units)), "b": np.zeros(self.units)}
        self.need_input_grad = True

    def config(self):
        return {"units": self.units, "in_features": self.in_features}

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ValueError(f"dense expects input ({self.in_features},), got {tuple(in_shape)}")
        return (self.units,)

    def forward(self, x, training=False, rng=None):
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        self.grads = {"W": self._x.T @ dout, "b": dout.sum(axis=0)}
        return dout @ self.params["W"].T if self.need_input_grad else None


class Softmax(Layer):
    """Terminal layer; its backward pass is fused with cross-entropy in the model."""

    kind = "softmax"

    def forward(self, x, training=False, rng=None):
        e = np.exp(x - x.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def backward(self, dout):
        raise RuntimeError("softmax backward is fused with the cross-entropy loss")
