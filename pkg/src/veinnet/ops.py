"""Differentiable layer kernels: convolution, batch norm, ReLU, max pooling,
global/channel pooling, dense, sigmoid, softmax.

Each layer is a small class holding its parameters, matching gradient
buffers, and whatever forward intermediates its backward pass needs.
Backward calls accumulate (+=) into the gradient buffers so repeated
backward passes sum, and return the gradient with respect to the input.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, as_shape4


def _uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def conv_out_extent(extent: int, k: int, stride: int, pad: int) -> int:
    span = extent + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"window {k} stride {stride} pad {pad} does not tile extent {extent}")
    return span // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """Unfold (n,c,h,w) into patch rows of shape (n*oh*ow, c*k*k)."""
    n, c, h, w = x.shape
    oh = conv_out_extent(h, k, stride, pad)
    ow = conv_out_extent(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (n,c,oh,ow,k,k) -> (n,oh,ow,c,k,k) -> rows
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * oh * ow, c * k * k), oh, ow


def col2im(dcols: np.ndarray, x_shape, k: int, stride: int, pad: int):
    """Adjoint of im2col: scatter-add patch rows back onto the input grid."""
    n, c, h, w = x_shape
    oh = conv_out_extent(h, k, stride, pad)
    ow = conv_out_extent(w, k, stride, pad)
    dpatch = dcols.reshape(n, oh, ow, c, k, k)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for l in range(k):
        for m in range(k):
            dxp[:, :, l:l + oh * stride:stride, m:m + ow * stride:stride] += \
                dpatch[:, :, :, :, l, m].transpose(0, 3, 1, 2)
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv2d_direct(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                  stride: int = 1, pad: int = 0) -> np.ndarray:
    """Reference convolution: explicit window-by-window evaluation.

    Slow path kept as an oracle for the im2col implementation.
    """
    n, c, h, wd = as_shape4(x)
    oc, ic, k, _ = w.shape
    if c != ic:
        raise ShapeError(f"input has {c} channels, kernel expects {ic}")
    oh = conv_out_extent(h, k, stride, pad)
    ow = conv_out_extent(wd, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.empty((n, oc, oh, ow), dtype=x.dtype)
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, :, i * stride:i * stride + k, j * stride:j * stride + k]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3])) + b
    return out


class Conv2d:
    """2-D convolution (affine part only; activation lives in its own layer)."""

    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1,
                 pad: int = 0, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.k, self.stride, self.pad = k, stride, pad
        rng = rng or np.random.default_rng(0)
        self.w = _uniform_init(rng, (out_ch, in_ch, k, k), in_ch * k * k, dtype)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._cols = None
        self._x_shape = None

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        n, c, h, w = as_shape4(x)
        if c != self.in_ch:
            raise ShapeError(f"input has {c} channels, layer expects {self.in_ch}")
        cols, oh, ow = im2col(x, self.k, self.stride, self.pad)
        self._cols, self._x_shape = cols, x.shape
        wmat = self.w.reshape(self.out_ch, -1)
        y = cols @ wmat.T + self.b
        return np.ascontiguousarray(
            y.reshape(n, oh, ow, self.out_ch).transpose(0, 3, 1, 2))

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cols is None:
            raise RuntimeError("backward called before forward")
        n, oc, oh, ow = grad_out.shape
        gflat = grad_out.transpose(0, 2, 3, 1).reshape(-1, oc)
        self.dw += (gflat.T @ self._cols).reshape(self.w.shape)
        self.db += gflat.sum(axis=0)
        dcols = gflat @ self.w.reshape(oc, -1)
        return col2im(dcols, self._x_shape, self.k, self.stride, self.pad)

    def params(self, prefix: str):
        return [(f"{prefix}.weight", self.w, self.dw),
                (f"{prefix}.bias", self.b, self.db)]

    def state(self, prefix: str):
        return []

    def kink_signature(self):
        return b""


class BatchNorm2d:
    """Per-channel batch normalization over the (n,h,w) axes."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float32):
        self.channels = channels
        self.eps, self.momentum = eps, momentum
        self.scale = np.ones(channels, dtype=dtype)
        self.shift = np.zeros(channels, dtype=dtype)
        self.dscale = np.zeros_like(self.scale)
        self.dshift = np.zeros_like(self.shift)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._xhat = None
        self._invstd = None

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        n, c, h, w = as_shape4(x)
        if c != self.channels:
            raise ShapeError(f"input has {c} channels, layer expects {self.channels}")
        if training:
            if n * h * w < 2:
                raise ShapeError("batch normalization needs >= 2 values per channel")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))  # biased
            self.running_mean[:] = ((1 - self.momentum) * self.running_mean
                                    + self.momentum * mean)
            self.running_var[:] = ((1 - self.momentum) * self.running_var
                                   + self.momentum * var)
        else:
            mean, var = self.running_mean, self.running_var
        invstd = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * invstd[None, :, None, None]
        if training:
            self._xhat, self._invstd = xhat, invstd
        else:
            self._xhat = None
        return self.scale[None, :, None, None] * xhat + self.shift[None, :, None, None]

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._xhat is None:
            raise RuntimeError("backward needs a preceding training-mode forward")
        xhat, invstd = self._xhat, self._invstd
        n, c, h, w = grad_out.shape
        m = n * h * w
        self.dshift += grad_out.sum(axis=(0, 2, 3))
        self.dscale += (grad_out * xhat).sum(axis=(0, 2, 3))
        dxhat = grad_out * self.scale[None, :, None, None]
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return (invstd[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)

    def params(self, prefix: str):
        return [(f"{prefix}.scale", self.scale, self.dscale),
                (f"{prefix}.shift", self.shift, self.dshift)]

    def state(self, prefix: str):
        return [(f"{prefix}.running_mean", self.running_mean),
                (f"{prefix}.running_var", self.running_var)]

    def kink_signature(self):
        return b""


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        self._mask = x > 0  # gradient at exactly 0 is 0
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return np.where(self._mask, grad_out, grad_out.dtype.type(0))

    def params(self, prefix: str):
        return []

    def state(self, prefix: str):
        return []

    def kink_signature(self):
        return self._mask.tobytes()


class Sigmoid:
    def __init__(self):
        self._y = None

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        self._y = 1.0 / (1.0 + np.exp(-x))
        return self._y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return grad_out * self._y * (1.0 - self._y)

    def params(self, prefix: str):
        return []

    def state(self, prefix: str):
        return []

    def kink_signature(self):
        return b""


class MaxPool2d:
    """Unpadded max pooling; ties go to the lowest linear window index so the
    backward routing is deterministic."""

    def __init__(self, window: int, stride: int):
        self.window, self.stride = window, stride
        self._arg = None
        self._x_shape = None

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        n, c, h, w = as_shape4(x)
        k, s = self.window, self.stride
        oh = conv_out_extent(h, k, s, 0)
        ow = conv_out_extent(w, k, s, 0)
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        flat = win.reshape(n, c, oh, ow, k * k)
        self._arg = np.argmax(flat, axis=-1)  # first max wins
        self._x_shape = x.shape
        return np.take_along_axis(flat, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._arg is None:
            raise RuntimeError("backward called before forward")
        n, c, oh, ow = grad_out.shape
        k, s = self.window, self.stride
        dx = np.zeros(self._x_shape, dtype=grad_out.dtype)
        ni, ci, ii, ji = np.indices((n, c, oh, ow))
        hi = ii * s + self._arg // k
        wi = ji * s + self._arg % k
        np.add.at(dx, (ni, ci, hi, wi), grad_out)
        return dx

    def params(self, prefix: str):
        return []

    def state(self, prefix: str):
        return []

    def kink_signature(self):
        return self._arg.tobytes()


def maxpool_reference(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    """Brute-force per-window scan, the oracle for MaxPool2d."""
    n, c, h, w = x.shape
    oh = conv_out_extent(h, window, stride, 0)
    ow = conv_out_extent(w, window, stride, 0)
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    for i in range(oh):
        for j in range(ow):
            out[:, :, i, j] = x[:, :, i * stride:i * stride + window,
                                j * stride:j * stride + window].max(axis=(2, 3))
    return out


class Flatten:
    def __init__(self):
        self._x_shape = None

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        self._x_shape = x.shape
        n, c, h, w = as_shape4(x)
        return np.ascontiguousarray(x).reshape(n, c * h * w, 1, 1)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return grad_out.reshape(self._x_shape)

    def params(self, prefix: str):
        return []

    def state(self, prefix: str):
        return []

    def kink_signature(self):
        return b""


class Dense:
    """Fully connected layer on (n, f, 1, 1) tensors."""

    def __init__(self, in_f: int, out_f: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.in_f, self.out_f = in_f, out_f
        rng = rng or np.random.default_rng(0)
        self.w = _uniform_init(rng, (out_f, in_f), in_f, dtype)
        self.b = np.zeros(out_f, dtype=dtype)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._x2d = None

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        n, f, h, w = as_shape4(x)
        if (f, h, w) != (self.in_f, 1, 1):
            raise ShapeError(
                f"dense layer expects (n,{self.in_f},1,1), got {x.shape}")
        self._x2d = x.reshape(n, f)
        return (self._x2d @ self.w.T + self.b).reshape(n, self.out_f, 1, 1)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._x2d is None:
            raise RuntimeError("backward called before forward")
        g2d = grad_out.reshape(grad_out.shape[0], self.out_f)
        self.dw += g2d.T @ self._x2d
        self.db += g2d.sum(axis=0)
        return (g2d @ self.w).reshape(-1, self.in_f, 1, 1)

    def params(self, prefix: str):
        return [(f"{prefix}.weight", self.w, self.dw),
                (f"{prefix}.bias", self.b, self.db)]

    def state(self, prefix: str):
        return []

    def kink_signature(self):
        return b""


def spatial_pool(x: np.ndarray, mode: str) -> np.ndarray:
    """Global spatial pooling per channel: (n,c,h,w) -> (n,c,1,1)."""
    as_shape4(x)
    if mode == "avg":
        return x.mean(axis=(2, 3), keepdims=True)
    if mode == "max":
        return x.max(axis=(2, 3), keepdims=True)
    raise ValueError(f"unknown pooling mode {mode!r}")


def channel_pool(x: np.ndarray, mode: str) -> np.ndarray:
    """Cross-channel pooling per position: (n,c,h,w) -> (n,1,h,w)."""
    as_shape4(x)
    if mode == "avg":
        return x.mean(axis=1, keepdims=True)
    if mode == "max":
        return x.max(axis=1, keepdims=True)
    raise ValueError(f"unknown pooling mode {mode!r}")


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax on (n,C,1,1) logits, max-shifted for stability."""
    n, c, h, w = as_shape4(z)
    if (h, w) != (1, 1):
        raise ShapeError(f"softmax expects (n,C,1,1), got {z.shape}")
    z2d = z.reshape(n, c)
    e = np.exp(z2d - z2d.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)).reshape(z.shape)
