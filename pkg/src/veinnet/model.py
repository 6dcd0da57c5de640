"""Network assembly: two conv-BN-ReLU-pool stages, an optional attention
block on the final feature map, then flatten, one dense layer and softmax.

Also owns the binary checkpoint format (magic "VATN") shared with the CLI.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .attention import Cbam
from .ops import (BatchNorm2d, Conv2d, Dense, Flatten, MaxPool2d, ReLU,
                  conv_out_extent, softmax)
from .tensor import ShapeError

CHECKPOINT_MAGIC = b"VATN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    num_classes: int
    input_h: int = 81
    input_w: int = 333
    conv_widths: tuple[int, ...] = (16, 32)
    kernel: int = 5
    pool: int = 3
    pool_stride: int = 3
    use_cbam: bool = True
    reduction: int = 16
    sam_kernel: int = 7

    def __post_init__(self):
        if self.num_classes < 2:
            raise ShapeError("closed-set identification needs >= 2 classes")

    def shape_chain(self) -> list[tuple[int, int, int]]:
        """(channels, h, w) after each conv and pool stage, ending pre-flatten."""
        chain = []
        h, w = self.input_h, self.input_w
        pad = (self.kernel - 1) // 2
        for width in self.conv_widths:
            h = conv_out_extent(h, self.kernel, 1, pad)
            w = conv_out_extent(w, self.kernel, 1, pad)
            chain.append((width, h, w))
            h = conv_out_extent(h, self.pool, self.pool_stride, 0)
            w = conv_out_extent(w, self.pool, self.pool_stride, 0)
            chain.append((width, h, w))
        return chain

    @property
    def flat_features(self) -> int:
        c, h, w = self.shape_chain()[-1]
        return c * h * w


class Model:
    """Instantiated network: ordered named layers plus their parameters."""

    def __init__(self, spec: ModelSpec, seed: int, dtype=np.float32):
        self.spec = spec
        self.seed = seed
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        pad = (spec.kernel - 1) // 2
        layers: list[tuple[str, object]] = []
        in_ch = 1
        for i, width in enumerate(spec.conv_widths, start=1):
            layers.append((f"conv{i}", Conv2d(in_ch, width, spec.kernel, 1, pad,
                                              rng=rng, dtype=dtype)))
            layers.append((f"bn{i}", BatchNorm2d(width, dtype=dtype)))
            layers.append((f"relu{i}", ReLU()))
            layers.append((f"pool{i}", MaxPool2d(spec.pool, spec.pool_stride)))
            in_ch = width
        if spec.use_cbam:
            layers.append(("cbam", Cbam(in_ch, spec.reduction, spec.sam_kernel,
                                        rng=rng, dtype=dtype)))
        layers.append(("flatten", Flatten()))
        layers.append(("head.dense", Dense(spec.flat_features, spec.num_classes,
                                           rng=rng, dtype=dtype)))
        self.layers = layers
        self._logits = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        """Run the network and return class probabilities (n, C, 1, 1)."""
        if x.ndim != 4 or x.shape[1:] != (1, self.spec.input_h, self.spec.input_w):
            raise ShapeError(
                f"expected (n,1,{self.spec.input_h},{self.spec.input_w}), "
                f"got {x.shape}")
        y = x.astype(self.dtype, copy=False)
        for _, layer in self.layers:
            y = layer.forward(y, training)
        self._logits = y
        return softmax(y)

    def backward(self, grad_logits: np.ndarray) -> None:
        """Accumulate all parameter gradients from a logit-space gradient."""
        if self._logits is None:
            raise RuntimeError("backward called before forward")
        g = grad_logits
        for _, layer in reversed(self.layers):
            g = layer.backward(g)

    def parameters(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        out = []
        for name, layer in self.layers:
            out.extend(layer.params(name))
        return out

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Trainable parameters plus BN running stats, checkpoint order."""
        out = [(name, arr) for name, arr, _ in self.parameters()]
        for name, layer in self.layers:
            out.extend(layer.state(name))
        return out

    def zero_grads(self) -> None:
        for _, _, grad in self.parameters():
            grad[:] = 0

    def kink_signature(self) -> bytes:
        return b"".join(layer.kink_signature() for _, layer in self.layers)

    def predict(self, x: np.ndarray) -> np.ndarray:
        probs = self.forward(x, training=False)
        return probs.reshape(probs.shape[0], -1).argmax(axis=1)


def build(spec: ModelSpec, seed: int, dtype=np.float32) -> Model:
    return Model(spec, seed, dtype)


def _write_array(f, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    f.write(struct.pack("<I", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_array(f) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", f.read(4))
    name = f.read(name_len).decode("utf-8")
    (rank,) = struct.unpack("<I", f.read(4))
    shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape)
    return name, data


def save_checkpoint(model: Model, path) -> None:
    spec = model.spec
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        widths = spec.conv_widths
        f.write(struct.pack("<3I", spec.input_h, spec.input_w, len(widths)))
        f.write(struct.pack(f"<{len(widths)}I", *widths))
        f.write(struct.pack("<8I", spec.kernel, spec.pool, spec.pool_stride,
                            int(spec.use_cbam), spec.reduction, spec.sam_kernel,
                            spec.num_classes, model.seed & 0xFFFFFFFF))
        arrays = model.state_arrays()
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            _write_array(f, name, arr)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, dtype=np.float32) -> Model:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        input_h, input_w, n_widths = struct.unpack("<3I", f.read(12))
        widths = struct.unpack(f"<{n_widths}I", f.read(4 * n_widths))
        (kernel, pool, pool_stride, use_cbam, reduction, sam_kernel,
         num_classes, seed) = struct.unpack("<8I", f.read(32))
        spec = ModelSpec(num_classes=num_classes, input_h=input_h,
                         input_w=input_w, conv_widths=tuple(widths),
                         kernel=kernel, pool=pool, pool_stride=pool_stride,
                         use_cbam=bool(use_cbam), reduction=reduction,
                         sam_kernel=sam_kernel)
        model = Model(spec, seed, dtype=dtype)
        stored = {}
        (count,) = struct.unpack("<I", f.read(4))
        for _ in range(count):
            name, arr = _read_array(f)
            stored[name] = arr
    for name, arr in model.state_arrays():
        if name not in stored:
            raise CheckpointError(f"{path}: missing array {name!r}")
        if stored[name].shape != arr.shape:
            raise CheckpointError(
                f"{path}: {name} has shape {stored[name].shape}, "
                f"expected {arr.shape}")
        arr[:] = stored[name].astype(dtype)
    return model
