"""Training-curve figures rendered next to the metrics CSV."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .train import EpochMetrics  # noqa: E402


def save_training_curves(metrics: list[EpochMetrics], csv_path) -> list[Path]:
    """Render loss and accuracy curves as PNGs alongside the CSV; returns
    the written paths."""
    csv_path = Path(csv_path)
    epochs = [m.epoch for m in metrics]
    out = []

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [m.train_loss for m in metrics], marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.set_title("Training loss")
    ax.grid(True, alpha=0.3)
    loss_png = csv_path.with_name(csv_path.stem + "_loss.png")
    fig.savefig(loss_png, dpi=120, bbox_inches="tight")
    plt.close(fig)
    out.append(loss_png)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [m.train_acc for m in metrics], marker="o", ms=3,
            label="train")
    ax.plot(epochs, [m.test_acc for m in metrics], marker="s", ms=3,
            label="test")
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    ax.set_title("Accuracy")
    ax.legend()
    ax.grid(True, alpha=0.3)
    acc_png = csv_path.with_name(csv_path.stem + "_accuracy.png")
    fig.savefig(acc_png, dpi=120, bbox_inches="tight")
    plt.close(fig)
    out.append(acc_png)
    return out
