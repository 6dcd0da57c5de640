"""Dataset ingestion and the synthetic vein-image generator.

Real data is a directory tree `root/<class_name>/<image>.pgm` of grayscale
ROI crops; class indices follow sorted directory names. Every image is
scaled to [0,1] by its maxval and bilinearly resized to the network input.
The generator draws, per class, a fixed template of smooth dark curves on a
bright background and re-renders it per image with small translation jitter
and additive noise, giving a license-free stand-in for vein databases.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ShapeError

VTEN_MAGIC = b"VTEN"


class DataError(Exception):
    """Unreadable, malformed, or degenerate input data."""


# ---------------------------------------------------------------- PGM I/O

def parse_pgm(data: bytes) -> tuple[np.ndarray, int]:
    """Decode a binary (P5) PGM; returns (pixels as (h,w) uint8, maxval)."""
    pos = 0

    def next_token() -> bytes:
        nonlocal pos
        while pos < len(data):
            ch = data[pos:pos + 1]
            if ch == b"#":
                while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PGM header")
        return data[start:pos]

    magic = next_token()
    if magic != b"P5":
        raise DataError(f"unsupported PNM magic {magic!r} (binary P5 only)")
    try:
        width = int(next_token())
        height = int(next_token())
        maxval = int(next_token())
    except ValueError as exc:
        raise DataError(f"bad PGM header field: {exc}") from exc
    if width < 1 or height < 1:
        raise DataError(f"bad PGM dimensions {width}x{height}")
    if not 0 < maxval <= 255:
        raise DataError(f"unsupported maxval {maxval} (need 1..255)")
    pos += 1  # single whitespace byte after maxval
    payload = data[pos:pos + width * height]
    if len(payload) != width * height:
        raise DataError("truncated PGM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width), maxval


def load_pgm(path) -> tuple[np.ndarray, int]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return parse_pgm(raw)


def write_pgm(path, img: np.ndarray) -> None:
    if img.ndim != 2 or img.dtype != np.uint8:
        raise DataError("write_pgm expects a 2-D uint8 array")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


# ------------------------------------------------------- raw tensor files

def write_vten(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(VTEN_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_vten(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != VTEN_MAGIC:
        raise DataError(f"{path}: not a raw tensor file")
    (rank,) = struct.unpack("<I", raw[4:8])
    shape = struct.unpack(f"<{rank}I", raw[8:8 + 4 * rank])
    count = int(np.prod(shape))
    data = np.frombuffer(raw[8 + 4 * rank:], dtype="<f4")
    if data.size != count:
        raise DataError(f"{path}: truncated raw tensor payload")
    return data.reshape(shape).copy()


# ----------------------------------------------------------------- resize

def resize_bilinear(img: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Corner-aligned bilinear resampling of a 2-D image."""
    sh, sw = img.shape
    if sh < 2 or sw < 2:
        raise DataError(f"source {sh}x{sw} too small to resample")
    ys = np.linspace(0.0, sh - 1, target_h)
    xs = np.linspace(0.0, sw - 1, target_w)
    y0 = np.clip(np.floor(ys).astype(int), 0, sh - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, sw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    img = img.astype(np.float64, copy=False)
    tl = img[np.ix_(y0, x0)]
    tr = img[np.ix_(y0, x0 + 1)]
    bl = img[np.ix_(y0 + 1, x0)]
    br = img[np.ix_(y0 + 1, x0 + 1)]
    top = tl + (tr - tl) * fx
    bot = bl + (br - bl) * fx
    return top + (bot - top) * fy


# ---------------------------------------------------------------- dataset

@dataclass
class Dataset:
    images: np.ndarray            # (N, 1, h, w) float32 in [0,1]
    labels: np.ndarray            # (N,) int64
    class_names: list[str]
    source_ids: list[str]
    provenance: str = "real"

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ShapeError(f"images must be (N,1,h,w), got {self.images.shape}")
        counts = np.bincount(self.labels, minlength=len(self.class_names))
        if (counts == 0).any():
            raise DataError("every class must be nonempty")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return self.images.shape[0]


def _decode_image_file(path: Path, target_h: int, target_w: int) -> np.ndarray:
    if path.suffix.lower() == ".vten":
        img = read_vten(path)
        if img.ndim != 2:
            raise DataError(f"{path}: raw tensor image must be 2-D")
    else:
        pixels, maxval = load_pgm(path)
        img = pixels.astype(np.float64) / maxval
    if img.shape != (target_h, target_w):
        img = resize_bilinear(img, target_h, target_w)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def load_dataset(root, target_h: int = 81, target_w: int = 333) -> Dataset:
    """Read `root/<class>/<image>.{pgm,vten}` into a labeled dataset."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if len(class_dirs) < 2:
        raise DataError("closed-set identification needs >= 2 class directories")
    images, labels, ids = [], [], []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(p for p in class_dir.iterdir()
                       if p.suffix.lower() in (".pgm", ".vten"))
        if not files:
            raise DataError(f"class directory {class_dir} holds no images")
        for p in files:
            images.append(_decode_image_file(p, target_h, target_w)[None])
            labels.append(label)
            ids.append(f"{class_dir.name}/{p.name}")
    return Dataset(images=np.stack(images),
                   labels=np.asarray(labels, dtype=np.int64),
                   class_names=[d.name for d in class_dirs],
                   source_ids=ids, provenance="real")


# ----------------------------------------------------- synthetic generator

@dataclass(frozen=True)
class SynthConfig:
    num_classes: int
    images_per_class: int = 12
    vein_count: tuple[int, int] = (3, 8)
    thickness: tuple[float, float] = (1.5, 3.5)
    depth: tuple[float, float] = (0.35, 0.6)
    noise: float = 0.02
    jitter: int = 2
    seed: int = 0
    height: int = 81
    width: int = 333

    def __post_init__(self):
        if self.images_per_class < 2:
            raise DataError("need >= 2 images per class for a train/test split")
        if self.num_classes < 2:
            raise DataError("need >= 2 classes")


def _smooth(y: np.ndarray, half: int = 8) -> np.ndarray:
    kernel = np.exp(-0.5 * (np.arange(-half, half + 1) / (half / 2)) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(y, half, mode="edge")
    return np.convolve(padded, kernel, mode="valid")


def _render(template, h, w, dy, dx, noise, rng):
    img = np.full((h, w), 0.9)
    rows = np.arange(h)[:, None]
    xs = np.arange(w, dtype=np.float64)
    for curve_y, thickness, depth in template:
        y = np.interp(xs - dx, xs, curve_y) + dy
        img -= depth * np.exp(-((rows - y[None, :]) / thickness) ** 2)
    if noise > 0:
        img += rng.normal(scale=noise, size=(h, w))
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255) / 255  # match the PGM round trip exactly


def _class_template(rng, cfg: SynthConfig):
    n_curves = int(rng.integers(cfg.vein_count[0], cfg.vein_count[1] + 1))
    template = []
    for _ in range(n_curves):
        ctrl_x = np.linspace(0, cfg.width - 1, 6)
        margin = min(6.0, cfg.height / 8)
        ctrl_y = rng.uniform(margin, cfg.height - 1 - margin, size=6)
        curve_y = _smooth(np.interp(np.arange(cfg.width), ctrl_x, ctrl_y))
        thickness = rng.uniform(*cfg.thickness)
        depth = rng.uniform(*cfg.depth)
        template.append((curve_y, thickness, depth))
    return template


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Deterministic procedural dataset: one curve template per class, each
    image a jittered, noisy redraw of its template."""
    images, labels, ids = [], [], []
    for class_i in range(cfg.num_classes):
        rng = np.random.default_rng([cfg.seed, class_i])
        template = _class_template(rng, cfg)
        for img_i in range(cfg.images_per_class):
            if cfg.jitter > 0:
                dy, dx = rng.integers(-cfg.jitter, cfg.jitter + 1, size=2)
            else:
                dy = dx = 0
            img = _render(template, cfg.height, cfg.width, dy, dx,
                          cfg.noise, rng)
            images.append(img.astype(np.float32)[None])
            labels.append(class_i)
            ids.append(f"class_{class_i:03d}/img_{img_i:02d}.pgm")
    ds = Dataset(images=np.stack(images),
                 labels=np.asarray(labels, dtype=np.int64),
                 class_names=[f"class_{i:03d}" for i in range(cfg.num_classes)],
                 source_ids=ids, provenance="synthetic")
    margin = separation_margin(ds)
    if margin <= 0:
        raise DataError(
            f"generated classes are not separable (margin {margin:.4f})")
    return ds


def separation_margin(ds: Dataset) -> float:
    """Mean inter-class minus mean intra-class raw-pixel L2 distance."""
    flat = ds.images.reshape(len(ds), -1).astype(np.float64)
    sq = (flat ** 2).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * flat @ flat.T, 0.0)
    dist = np.sqrt(d2)
    same = ds.labels[:, None] == ds.labels[None, :]
    off_diag = ~np.eye(len(ds), dtype=bool)
    intra = dist[same & off_diag].mean()
    inter = dist[~same].mean()
    return float(inter - intra)


def write_dataset_pgm(ds: Dataset, outdir) -> int:
    """Materialize a dataset as a PGM directory tree; returns file count."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    count = 0
    for img, sid in zip(ds.images, ds.source_ids):
        path = outdir / sid
        path.parent.mkdir(parents=True, exist_ok=True)
        write_pgm(path, np.round(img[0] * 255).astype(np.uint8))
        count += 1
    return count


# ---------------------------------------------------------------- batching

def batches(ds: Dataset, indices: np.ndarray, batch_size: int, seed: int,
            epoch: int = 0):
    """Yield (images, labels) mini-batches in a seed+epoch-derived shuffle;
    the final short batch is kept."""
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= len(ds)):
        raise DataError("batch indices out of range")
    order = np.random.default_rng([seed, epoch]).permutation(indices)
    for start in range(0, order.size, batch_size):
        chunk = order[start:start + batch_size]
        yield ds.images[chunk], ds.labels[chunk]
