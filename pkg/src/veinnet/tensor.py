"""4-D tensor helpers shared by every layer.

All feature maps are dense numpy arrays in (batch, channel, height, width)
order, row-major, float32 for training and float64 for gradient checking.
Broadcasting is deliberately restricted to the two patterns the attention
block needs: a per-channel map (n,c,1,1) and a per-position map (n,1,h,w).
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np


class ShapeError(ValueError):
    """Raised when an array's shape violates an operation's contract."""


class Shape4(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    def validate(self) -> "Shape4":
        if any(int(e) < 1 for e in self):
            raise ShapeError(f"all extents must be >= 1, got {tuple(self)}")
        return self

    @property
    def size(self) -> int:
        return self.n * self.c * self.h * self.w


def as_shape4(x: np.ndarray) -> Shape4:
    if x.ndim != 4:
        raise ShapeError(f"expected a 4-D array, got shape {x.shape}")
    return Shape4(*x.shape).validate()


def assert_finite(x: np.ndarray, what: str = "tensor") -> None:
    if not np.isfinite(x).all():
        raise FloatingPointError(f"{what} contains NaN or Inf")


def filled(shape: tuple[int, int, int, int], value: float,
           dtype=np.float32) -> np.ndarray:
    s = Shape4(*shape).validate()
    out = np.full(tuple(s), value, dtype=dtype)
    assert_finite(out, "filled")
    return out


def broadcast_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise product of a feature map with an attention map.

    b must have a's shape, or be a channel map (n,c,1,1), or a spatial map
    (n,1,h,w); the output always has a's shape.
    """
    n, c, h, w = as_shape4(a)
    bs = as_shape4(b)
    ok = bs == (n, c, h, w) or bs == (n, c, 1, 1) or bs == (n, 1, h, w)
    if not ok:
        raise ShapeError(f"cannot broadcast {tuple(bs)} against {(n, c, h, w)}")
    out = a * b
    assert_finite(out, "broadcast_mul")
    return out


def allclose(a: np.ndarray, b: np.ndarray, rel_tol: float,
             abs_tol: float) -> bool:
    if as_shape4(a) != as_shape4(b):
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return bool(np.all(np.abs(a - b) <= abs_tol + rel_tol * np.abs(b)))


def flatten(x: np.ndarray) -> np.ndarray:
    """(n,c,h,w) -> (n, c*h*w, 1, 1) preserving c->h->w element order."""
    n, c, h, w = as_shape4(x)
    return np.ascontiguousarray(x).reshape(n, c * h * w, 1, 1)


def unflatten(x: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    n, c, h, w = Shape4(*shape).validate()
    if x.shape != (n, c * h * w, 1, 1):
        raise ShapeError(f"cannot unflatten {x.shape} to {shape}")
    return x.reshape(n, c, h, w)
