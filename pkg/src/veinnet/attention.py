"""Channel and spatial attention gating of a feature map.

The channel gate squeezes each channel to its spatial average and maximum,
pushes both descriptors through one shared two-layer perceptron, sums, and
applies a sigmoid. The spatial gate stacks the cross-channel average and
maximum maps, convolves them down to one channel, and applies a sigmoid.
The block multiplies the feature map by the channel gate first, then by the
spatial gate, and its backward pass carries the full dependence of both
gates on the input (no straight-through shortcut).
"""
from __future__ import annotations

import numpy as np

from .ops import Conv2d, _uniform_init
from .tensor import ShapeError, as_shape4


def _tree_sum(x: np.ndarray) -> np.ndarray:
    """Sum along the last axis with a fixed pairwise order.

    Library reductions pick their accumulation order from the buffer's
    length and alignment, so two bitwise-equal arrays can sum to values a
    few ulp apart. Explicit elementwise adds pin the order to the element
    positions alone, making the result reproducible across layouts.
    """
    while x.shape[-1] > 1:
        if x.shape[-1] % 2:
            x = np.concatenate(
                [x[..., 0:-1:2] + x[..., 1::2], x[..., -1:]], axis=-1)
        else:
            x = x[..., 0::2] + x[..., 1::2]
    return x[..., 0]


class ChannelAttention:
    """Per-channel gate from global avg/max descriptors through a shared MLP."""

    def __init__(self, channels: int, reduction: int = 16,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.channels = channels
        self.reduction = reduction
        hidden = max(channels // reduction, 1)
        self.hidden = hidden
        rng = rng or np.random.default_rng(0)
        # no biases: the gate is W1(relu(W0 .)) on both descriptors
        self.w0 = _uniform_init(rng, (hidden, channels), channels, dtype)
        self.w1 = _uniform_init(rng, (channels, hidden), hidden, dtype)
        self.dw0 = np.zeros_like(self.w0)
        self.dw1 = np.zeros_like(self.w1)
        self._cache = None

    def forward(self, f: np.ndarray, training: bool = True) -> np.ndarray:
        n, c, h, w = as_shape4(f)
        if c != self.channels:
            raise ShapeError(f"feature has {c} channels, gate expects {self.channels}")
        flat = f.reshape(n, c, h * w)
        # sum in sorted order so the descriptor is bitwise independent of
        # the spatial layout of the pixels, not just mathematically so
        avg = _tree_sum(np.sort(flat, axis=2)) / (h * w)
        arg = flat.argmax(axis=2)
        mx = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]
        ha_pre = avg @ self.w0.T
        hm_pre = mx @ self.w0.T
        ha = np.maximum(ha_pre, 0)
        hm = np.maximum(hm_pre, 0)
        s = ha @ self.w1.T + hm @ self.w1.T
        gate = 1.0 / (1.0 + np.exp(-s))
        self._cache = (f.shape, avg, mx, arg, ha_pre, hm_pre, ha, hm, gate)
        return gate.reshape(n, c, 1, 1)

    def backward(self, grad_gate: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        f_shape, avg, mx, arg, ha_pre, hm_pre, ha, hm, gate = self._cache
        n, c, h, w = f_shape
        ds = grad_gate.reshape(n, c) * gate * (1.0 - gate)
        self.dw1 += ds.T @ ha + ds.T @ hm
        dha = (ds @ self.w1) * (ha_pre > 0)
        dhm = (ds @ self.w1) * (hm_pre > 0)
        self.dw0 += dha.T @ avg + dhm.T @ mx
        davg = dha @ self.w0
        dmx = dhm @ self.w0
        df_flat = np.zeros((n, c, h * w), dtype=grad_gate.dtype)
        np.put_along_axis(df_flat, arg[:, :, None], dmx[:, :, None], axis=2)
        df_flat += davg[:, :, None] / (h * w)
        return df_flat.reshape(f_shape)

    def params(self, prefix: str):
        return [(f"{prefix}.w0", self.w0, self.dw0),
                (f"{prefix}.w1", self.w1, self.dw1)]

    def state(self, prefix: str):
        return []

    def kink_signature(self):
        _, _, _, arg, ha_pre, hm_pre, _, _, _ = self._cache
        return arg.tobytes() + (ha_pre > 0).tobytes() + (hm_pre > 0).tobytes()


class SpatialAttention:
    """Per-position gate from stacked cross-channel avg/max maps."""

    def __init__(self, kernel: int = 7, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        if kernel % 2 != 1:
            raise ShapeError("spatial attention kernel must be odd")
        self.kernel = kernel
        self.conv = Conv2d(2, 1, kernel, stride=1, pad=(kernel - 1) // 2,
                           rng=rng, dtype=dtype)
        self._cache = None

    def forward(self, f: np.ndarray, training: bool = True) -> np.ndarray:
        n, c, h, w = as_shape4(f)
        avg = f.mean(axis=1, keepdims=True)
        arg = f.argmax(axis=1, keepdims=True)
        mx = np.take_along_axis(f, arg, axis=1)
        stacked = np.concatenate([avg, mx], axis=1)  # [avg; max] order
        z = self.conv.forward(stacked)
        gate = 1.0 / (1.0 + np.exp(-z))
        self._cache = (f.shape, arg, gate)
        return gate

    def backward(self, grad_gate: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        f_shape, arg, gate = self._cache
        n, c, h, w = f_shape
        dz = grad_gate * gate * (1.0 - gate)
        dstacked = self.conv.backward(dz)
        df = np.zeros(f_shape, dtype=grad_gate.dtype)
        np.put_along_axis(df, arg, dstacked[:, 1:2], axis=1)
        df += dstacked[:, 0:1] / c
        return df

    def params(self, prefix: str):
        return self.conv.params(f"{prefix}.conv")

    def state(self, prefix: str):
        return []

    def kink_signature(self):
        _, arg, _ = self._cache
        return arg.tobytes()


class Cbam:
    """Sequential channel-then-spatial multiplicative refinement of a feature map."""

    def __init__(self, channels: int, reduction: int = 16, sam_kernel: int = 7,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.cam = ChannelAttention(channels, reduction, rng=rng, dtype=dtype)
        self.sam = SpatialAttention(sam_kernel, rng=rng, dtype=dtype)
        self._cache = None

    def forward(self, f: np.ndarray, training: bool = True) -> np.ndarray:
        mc = self.cam.forward(f, training)
        f1 = f * mc
        ms = self.sam.forward(f1, training)
        f2 = f1 * ms
        self._cache = (f, mc, f1, ms)
        return f2

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        f, mc, f1, ms = self._cache
        dms = (grad_out * f1).sum(axis=1, keepdims=True)
        df1 = grad_out * ms + self.sam.backward(dms)
        dmc = (df1 * f).sum(axis=(2, 3), keepdims=True)
        return df1 * mc + self.cam.backward(dmc)

    def params(self, prefix: str):
        return self.cam.params(f"{prefix}.cam") + self.sam.params(f"{prefix}.sam")

    def state(self, prefix: str):
        return []

    def kink_signature(self):
        return self.cam.kink_signature() + self.sam.kink_signature()
