"""Layer forward/backward kernels.

Layers hold parameters but no per-call state: forward writes its
intermediates into a caller-supplied cache dict, backward reads them back.
Inference with cache=None therefore never mutates shared state, which is
what makes a frozen network safe to share across threads.

Array layout is NCHW for spatial layers and (N, D) for feature layers.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import SpecError
from ..rng import normals


class Layer:
    name = "layer"

    def params(self):
        return []

    def out_shape(self, in_shape):
        raise NotImplementedError

    def forward(self, x, cache=None):
        raise NotImplementedError

    def backward(self, grad, cache):
        """Return (grad_input, [param_grads...])."""
        raise NotImplementedError


class Conv2d(Layer):
    """Zero-padded 'same' convolution: output spatial size is ceil(in/stride)."""

    name = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.weight = None
        self.bias = None

    def init_params(self, seed, dtype):
        k = self.kernel_size
        fan_in = self.in_channels * k * k
        std = np.sqrt(2.0 / fan_in)
        n = self.out_channels * fan_in
        self.weight = (std * normals(seed, n)).reshape(
            self.out_channels, self.in_channels, k, k).astype(dtype)
        self.bias = np.zeros(self.out_channels, dtype=dtype)

    def params(self):
        return [self.weight, self.bias]

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise SpecError(f"conv2d expects (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        if c != self.in_channels:
            raise SpecError(
                f"conv2d expects {self.in_channels} input channels, got {c}")
        s = self.stride
        return (self.out_channels, -(-h // s), -(-w // s))

    def _pad(self):
        lo = (self.kernel_size - 1) // 2
        return lo, self.kernel_size - 1 - lo

    def _columns(self, x):
        k, s = self.kernel_size, self.stride
        lo, hi = self._pad()
        xp = np.pad(x, ((0, 0), (0, 0), (lo, hi), (lo, hi)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n, _, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
        return cols, (ho, wo, xp.shape)

    def forward(self, x, cache=None):
        cols, (ho, wo, _) = self._columns(x)
        wmat = self.weight.reshape(self.out_channels, -1)
        out = cols @ wmat.T + self.bias
        out = out.reshape(x.shape[0], ho, wo, self.out_channels)
        if cache is not None:
            cache["x"] = x
        return out.transpose(0, 3, 1, 2)

    def backward(self, grad, cache):
        x = cache["x"]
        k, s = self.kernel_size, self.stride
        lo, hi = self._pad()
        n, _, ho, wo = grad.shape
        cols, (_, _, padded_shape) = self._columns(x)
        gmat = grad.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.out_channels)
        dw = (gmat.T @ cols).reshape(self.weight.shape)
        db = gmat.sum(axis=0)
        wmat = self.weight.reshape(self.out_channels, -1)
        dcols = (gmat @ wmat).reshape(n, ho, wo, self.in_channels, k, k)
        dcols = dcols.transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros(padded_shape, dtype=grad.dtype)
        for ky in range(k):
            for kx in range(k):
                dxp[:, :, ky:ky + s * ho:s, kx:kx + s * wo:s] += dcols[..., ky, kx]
        h, w = x.shape[2], x.shape[3]
        dx = dxp[:, :, lo:lo + h, lo:lo + w]
        return dx, [dw, db]


class ReLU(Layer):
    name = "relu"

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, cache=None):
        if cache is not None:
            cache["mask"] = x > 0
        return np.maximum(x, 0)

    def backward(self, grad, cache):
        return grad * cache["mask"], []


class MaxPool(Layer):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a
    window are dropped. Ties route the gradient to the first maximum."""

    name = "maxpool"

    def __init__(self, size):
        self.size = size

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise SpecError(f"maxpool expects (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        if h < self.size or w < self.size:
            raise SpecError(f"maxpool window {self.size} exceeds input {in_shape}")
        return (c, h // self.size, w // self.size)

    def _windows(self, x):
        s = self.size
        n, c, h, w = x.shape
        ho, wo = h // s, w // s
        xc = x[:, :, :ho * s, :wo * s]
        win = xc.reshape(n, c, ho, s, wo, s).transpose(0, 1, 2, 4, 3, 5)
        return win.reshape(n, c, ho, wo, s * s)

    def forward(self, x, cache=None):
        win = self._windows(x)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        if cache is not None:
            cache["idx"] = idx
            cache["in_shape"] = x.shape
        return out

    def backward(self, grad, cache):
        s = self.size
        n, c, h, w = cache["in_shape"]
        ho, wo = h // s, w // s
        dwin = np.zeros((n, c, ho, wo, s * s), dtype=grad.dtype)
        np.put_along_axis(dwin, cache["idx"][..., None], grad[..., None], axis=-1)
        dxc = dwin.reshape(n, c, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5)
        dxc = dxc.reshape(n, c, ho * s, wo * s)
        dx = np.zeros((n, c, h, w), dtype=grad.dtype)
        dx[:, :, :ho * s, :wo * s] = dxc
        return dx, []


class GlobalAvgPool(Layer):
    name = "global_avg_pool"

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise SpecError(f"global_avg_pool expects (C, H, W) input, got {in_shape}")
        return (in_shape[0],)

    def forward(self, x, cache=None):
        if cache is not None:
            cache["hw"] = x.shape[2:]
        return x.mean(axis=(2, 3))

    def backward(self, grad, cache):
        h, w = cache["hw"]
        dx = np.broadcast_to(grad[:, :, None, None] / (h * w),
                             grad.shape + (h, w))
        return np.ascontiguousarray(dx), []


class Flatten(Layer):
    """(C, H, W) features to one flat (C*H*W,) row per sample."""

    name = "flatten"

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise SpecError(f"flatten expects (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        return (c * h * w,)

    def forward(self, x, cache=None):
        if cache is not None:
            cache["shape"] = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad, cache):
        return grad.reshape(cache["shape"]), []


class Dense(Layer):
    name = "dense"

    def __init__(self, in_dim, out_dim):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = None
        self.bias = None

    def init_params(self, seed, dtype):
        std = np.sqrt(2.0 / self.in_dim)
        self.weight = (std * normals(seed, self.in_dim * self.out_dim)) \
            .reshape(self.in_dim, self.out_dim).astype(dtype)
        self.bias = np.zeros(self.out_dim, dtype=dtype)

    def params(self):
        return [self.weight, self.bias]

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise SpecError(
                f"dense expects flat (D,) features, got {in_shape}; "
                "insert flatten or global_avg_pool after convolutions")
        if in_shape[0] != self.in_dim:
            raise SpecError(f"dense expects {self.in_dim} features, got {in_shape[0]}")
        return (self.out_dim,)

    def forward(self, x, cache=None):
        if cache is not None:
            cache["x"] = x
        return x @ self.weight + self.bias

    def backward(self, grad, cache):
        x = cache["x"]
        dw = x.T @ grad
        db = grad.sum(axis=0)
        dx = grad @ self.weight.T
        return dx, [dw, db]


class L2Normalize(Layer):
    """Row-wise projection onto the unit sphere.

    A zero row cannot be normalized; it maps to the first basis vector with a
    zero gradient, and the event is counted on the layer.
    """

    name = "l2_normalize"

    def __init__(self):
        self.zero_input_count = 0

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise SpecError(f"l2_normalize expects flat (D,) features, got {in_shape}")
        return in_shape

    def forward(self, x, cache=None):
        norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
        zero = norms[:, 0] == 0.0
        if zero.any():
            self.zero_input_count += int(zero.sum())
            norms = norms.copy()
            norms[zero] = 1.0
        y = x / norms
        if zero.any():
            y[zero] = 0.0
            y[zero, 0] = 1.0
        if cache is not None:
            cache["y"] = y
            cache["norms"] = norms
            cache["zero"] = zero
        return y

    def backward(self, grad, cache):
        y = cache["y"]
        norms = cache["norms"]
        dot = (grad * y).sum(axis=1, keepdims=True)
        dx = (grad - y * dot) / norms
        if cache["zero"].any():
            dx[cache["zero"]] = 0.0
        return dx, []
