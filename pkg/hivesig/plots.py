"""
PNG renderings of training and evaluation results.

This module:
1. Draws loss/accuracy curves from a training history
2. Draws a confusion-matrix heatmap
3. Draws the four-panel compression stage chart (size, params, latency, accuracy)
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")

import numpy as np  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from .evalmetrics import ConfusionMatrix  # noqa: E402

logger = logging.getLogger(__name__)

DPI = 100
# no Software chunk: identical figures give identical bytes
_PNG_METADATA = {"Software": None}


def _save(fig: Figure, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI, metadata=_PNG_METADATA)
    logger.debug("Wrote %s", path)


def plot_history(history: Sequence[Dict[str, float]], path: Path, title: str = "Training") -> None:
    """Two panels: train/val loss and train/val accuracy per epoch."""
    epochs = [row["epoch"] for row in history]
    fig = Figure(figsize=(10, 4))
    ax_loss, ax_acc = fig.subplots(1, 2)
    ax_loss.plot(epochs, [row["train_loss"] for row in history], label="train")
    ax_loss.plot(epochs, [row["val_loss"] for row in history], label="validation")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_acc.plot(epochs, [row["train_acc"] for row in history], label="train")
    ax_acc.plot(epochs, [row["val_acc"] for row in history], label="validation")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0.0, 1.05)
    ax_acc.legend()
    fig.suptitle(title)
    fig.tight_layout()
    _save(fig, path)


def plot_confusion(cm: ConfusionMatrix, path: Path, title: str = "Confusion matrix") -> None:
    k = cm.k
    fig = Figure(figsize=(1.6 * k + 2, 1.6 * k + 1.5))
    ax = fig.subplots()
    image = ax.imshow(cm.counts, cmap="Blues")
    fig.colorbar(image, ax=ax)
    ax.set_xticks(range(k))
    ax.set_yticks(range(k))
    ax.set_xticklabels(cm.class_names, rotation=45, ha="right")
    ax.set_yticklabels(cm.class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    threshold = cm.counts.max() / 2 if cm.total else 0
    for t in range(k):
        for p in range(k):
            value = int(cm.counts[t, p])
            ax.text(p, t, str(value), ha="center", va="center", color="white" if value > threshold else "black")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


STAGE_PANELS = (
    ("size_mb", "Size (MB)"),
    ("params", "Parameters"),
    ("inference_seconds", "Inference time (s)"),
    ("accuracy", "Accuracy"),
)


def plot_stages(rows: List[Dict[str, Any]], path: Path) -> None:
    """One bar panel per metric; the x axis lists the stages in pipeline order."""
    stages = [row["stage"] for row in rows]
    x = np.arange(len(stages))
    fig = Figure(figsize=(12, 8))
    axes = fig.subplots(2, 2).ravel()
    for ax, (key, label) in zip(axes, STAGE_PANELS):
        values = [float(row[key]) for row in rows]
        ax.bar(x, values, color="tab:blue")
        ax.set_xticks(x)
        ax.set_xticklabels(stages, rotation=30, ha="right")
        ax.set_title(label)
        for xi, v in zip(x, values):
            ax.text(xi, v, f"{v:.3g}", ha="center", va="bottom", fontsize=8)
    fig.suptitle("Optimization stages")
    fig.tight_layout()
    _save(fig, path)
