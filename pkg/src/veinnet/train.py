"""Training: softmax cross-entropy, Adam, the stratified 70/30 split, and
the epoch loop with per-epoch metrics.

Everything downstream of the seed is deterministic: the split, the epoch
shuffles, and the parameter initialization all derive from it.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .data import DataError, Dataset, batches
from .model import Model

LOG_CLAMP = 1e-12


def cross_entropy(probs: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood plus the fused gradient with respect to
    the pre-softmax logits, (probs - onehot) / n."""
    labels = np.asarray(labels)
    n = probs.shape[0]
    c = probs.shape[1]
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0,{c})")
    p2d = probs.reshape(n, c)
    picked = p2d[np.arange(n), labels]
    loss = float(-np.log(np.maximum(picked, LOG_CLAMP)).mean())
    grad = p2d.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).reshape(probs.shape)


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.size == 0 or predictions.shape != labels.shape:
        raise ValueError("need equal-length, nonempty prediction/label lists")
    return float((predictions == labels).mean())


class Adam:
    """Standard Adam with bias correction; zeroes gradients after each step."""

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params  # list of (name, value, grad)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p) for name, p, _ in params}
        self.v = {name: np.zeros_like(p) for name, p, _ in params}

    def step(self) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, p, g in self.params:
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / correction1
            vhat = v / correction2
            p -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
            g[:] = 0


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 36
    epochs: int = 20
    train_fraction: float = 0.70
    seed: int = 0
    reduction: int = 16
    use_cbam: bool = True

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0,1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    seconds: float


METRICS_HEADER = "epoch,train_loss,train_acc,test_acc,seconds"


def format_metrics_row(m: EpochMetrics) -> str:
    return (f"{m.epoch},{m.train_loss!r},{m.train_acc!r},"
            f"{m.test_acc!r},{m.seconds:.3f}")


def write_metrics_csv(path, metrics: list[EpochMetrics]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(METRICS_HEADER + "\n")
        for m in metrics:
            f.write(format_metrics_row(m) + "\n")


def stratified_split(labels: np.ndarray, fraction: float,
                     seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class split: ceil(fraction*k) of each class's images train."""
    labels = np.asarray(labels)
    train, test = [], []
    for cls in np.unique(labels):
        idx = np.nonzero(labels == cls)[0]
        rng = np.random.default_rng([seed, 9157, int(cls)])
        idx = rng.permutation(idx)
        k = math.ceil(fraction * idx.size)
        train.extend(idx[:k])
        test.extend(idx[k:])
    return (np.sort(np.asarray(train, dtype=np.int64)),
            np.sort(np.asarray(test, dtype=np.int64)))


def evaluate(model: Model, ds: Dataset, indices: np.ndarray,
             batch_size: int = 36) -> tuple[float, np.ndarray]:
    """Inference-mode accuracy over the given indices; also returns the
    predicted class per index (in index order)."""
    preds = []
    for start in range(0, indices.size, batch_size):
        chunk = indices[start:start + batch_size]
        preds.append(model.predict(ds.images[chunk]))
    preds = np.concatenate(preds) if preds else np.empty(0, dtype=np.int64)
    return accuracy(preds, ds.labels[indices]), preds


def train_loop(model: Model, ds: Dataset, cfg: TrainConfig,
               metrics_sink=None, log=None, max_epochs: int | None = None,
               target_test_acc: float | None = None,
               min_epochs: int = 0) -> list[EpochMetrics]:
    """Run the epoch loop; returns one metrics record per epoch.

    metrics_sink, if given, is a text file object that receives the CSV
    header and one row per epoch as training progresses. With
    target_test_acc set, training stops early once the test accuracy
    reaches it (but not before min_epochs).
    """
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    if ds.num_classes < 2 or counts.min() < 2:
        raise DataError("training needs >= 2 classes with >= 2 images each")
    train_idx, test_idx = stratified_split(ds.labels, cfg.train_fraction,
                                           cfg.seed)
    if test_idx.size == 0:
        raise DataError("70/30 split produced an empty test set")
    opt = Adam(model.parameters(), lr=cfg.learning_rate)
    model.zero_grads()
    if metrics_sink is not None:
        metrics_sink.write(METRICS_HEADER + "\n")
    epochs = cfg.epochs if max_epochs is None else max_epochs
    metrics: list[EpochMetrics] = []
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        losses, correct, seen = [], 0, 0
        for images, labels in batches(ds, train_idx, cfg.batch_size,
                                      cfg.seed, epoch):
            probs = model.forward(images, training=True)
            loss, grad_logits = cross_entropy(probs, labels)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            model.backward(grad_logits)
            opt.step()
            losses.append(loss)
            correct += int((probs.reshape(len(labels), -1).argmax(axis=1)
                            == labels).sum())
            seen += len(labels)
        test_acc, _ = evaluate(model, ds, test_idx, cfg.batch_size)
        m = EpochMetrics(epoch=epoch, train_loss=float(np.mean(losses)),
                         train_acc=correct / seen, test_acc=test_acc,
                         seconds=time.perf_counter() - t0)
        metrics.append(m)
        if metrics_sink is not None:
            metrics_sink.write(format_metrics_row(m) + "\n")
            metrics_sink.flush()
        if log is not None:
            log(f"epoch {m.epoch:3d}  loss {m.train_loss:.4f}  "
                f"train {m.train_acc:.4f}  test {m.test_acc:.4f}")
        if (target_test_acc is not None and epoch >= min_epochs
                and test_acc >= target_test_acc):
            break
    return metrics
