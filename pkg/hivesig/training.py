"""
Datasets and the training loop.

This module:
1. Loads featurized TFR1 manifests into raster datasets
2. Splits them into stratified train/validation partitions
3. Trains a model with RMSprop and the step learning-rate schedule,
   keeping the best-validation-accuracy snapshot
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autograd import Tensor, cross_entropy, lr_schedule, one_hot, rmsprop_step, softmax_cross_entropy
from .config import TrainingConfig
from .errors import EmptyClass, EmptyDataset, IoFailure, OutOfRangeClass, ShapeMismatch
from .network import Model, NetworkSpec
from .tfrepr import read_tfr

logger = logging.getLogger(__name__)

MANIFEST_FIELDS = ["tfr_path", "label", "source"]
HISTORY_FIELDS = ["epoch", "lr", "train_loss", "val_loss", "train_acc", "val_acc"]
CLASSES_FILE = "classes.json"

History = List[Dict[str, float]]
# (logits, batch indices) -> (loss, extra per-batch scalars)
LossFn = Callable[[Tensor, np.ndarray], Tuple[Tensor, Dict[str, float]]]


@dataclass
class Dataset:
    """Rasters in NCHW float32 with integer labels."""

    x: np.ndarray
    y: np.ndarray
    class_names: List[str]
    sources: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ShapeMismatch(f"{len(self.x)} rasters but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= len(self.class_names)):
            raise OutOfRangeClass(f"labels must lie in [0, {len(self.class_names)})")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        sources = [self.sources[i] for i in idx] if self.sources else []
        return Dataset(self.x[idx], self.y[idx], list(self.class_names), sources)


def write_manifest(rows: List[Dict[str, str]], path: Path, class_names: List[str]) -> None:
    """Write manifest.csv (tfr_path, label, source) plus classes.json next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in MANIFEST_FIELDS})
    with open(path.parent / CLASSES_FILE, "w", encoding="utf-8") as f:
        json.dump(class_names, f, indent=2)
        f.write("\n")


def load_manifest(path: Path, channels: int = 3) -> Dataset:
    """Read a featurized manifest and rasterize every TFR1 matrix.

    Raises:
        IoFailure: Manifest or a referenced file is unreadable.
        EmptyDataset: Manifest lists no samples.
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            rows = list(csv.DictReader(f))
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    if not rows:
        raise EmptyDataset(f"manifest {path} lists no samples")
    if not set(MANIFEST_FIELDS) <= set(rows[0]):
        raise IoFailure(f"manifest {path} needs columns {', '.join(MANIFEST_FIELDS)}")

    classes_path = path.parent / CLASSES_FILE
    if classes_path.exists():
        with open(classes_path, "r", encoding="utf-8") as f:
            class_names = list(json.load(f))
    else:
        class_names = sorted({row["label"] for row in rows})
    index = {name: i for i, name in enumerate(class_names)}

    xs, ys, sources = [], [], []
    for row in rows:
        if row["label"] not in index:
            raise OutOfRangeClass(f"label {row['label']!r} is not one of {class_names}")
        tfr = Path(row["tfr_path"])
        if not tfr.is_absolute():
            tfr = path.parent / tfr
        raster = read_tfr(tfr).raster(channels=channels)
        xs.append(np.transpose(raster, (2, 0, 1)))
        ys.append(index[row["label"]])
        sources.append(row["source"])
    logger.info("Loaded %d samples over %d classes from %s", len(ys), len(class_names), path)
    return Dataset(np.stack(xs), np.array(ys), class_names, sources)


def stratified_split(
    y: np.ndarray, val_fraction: float, rng: np.random.Generator, n_classes: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled split; each class keeps at least one sample on each side.

    Raises:
        EmptyClass: A class has fewer than two samples.
    """
    y = np.asarray(y)
    train, val = [], []
    if n_classes is None:
        n_classes = int(y.max()) + 1 if len(y) else 0
    for c in range(n_classes):
        idx = np.flatnonzero(y == c)
        if len(idx) < 2:
            raise EmptyClass(f"class {c} has {len(idx)} samples; at least 2 are needed")
        idx = rng.permutation(idx)
        n_val = min(max(int(round(len(idx) * val_fraction)), 1), len(idx) - 1)
        val.append(idx[:n_val])
        train.append(idx[n_val:])
    if not train:
        raise EmptyDataset("no samples to split")
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def evaluate_loss_acc(model: Model, data: Dataset, idx: np.ndarray) -> Tuple[float, float]:
    probs = model.predict_proba(data.x[idx])
    target = one_hot(data.y[idx], model.spec.n_classes)
    acc = float(np.mean(probs.argmax(axis=1) == data.y[idx])) if len(idx) else 0.0
    return cross_entropy(probs, target), acc


def check_dataset(spec: NetworkSpec, data: Dataset) -> None:
    if len(data) == 0:
        raise EmptyDataset("dataset is empty")
    if tuple(data.x.shape[1:]) != tuple(spec.input_shape):
        raise ShapeMismatch(f"rasters are {tuple(data.x.shape[1:])}, network expects {spec.input_shape}")
    if data.n_classes != spec.n_classes:
        raise ShapeMismatch(f"dataset has {data.n_classes} classes, network outputs {spec.n_classes}")


def fit(
    model: Model,
    data: Dataset,
    split: Tuple[np.ndarray, np.ndarray],
    cfg: TrainingConfig,
    rng: np.random.Generator,
    epochs: int,
    loss_fn: LossFn,
    label: str = "train",
) -> Tuple[Model, History]:
    """The shared epoch loop behind train(), distill() and fine-tuning.

    Returns:
        (copy of the model at its best validation accuracy, per-epoch history)
    """
    train_idx, val_idx = split
    state: Dict[str, np.ndarray] = {}
    history: History = []
    best, best_acc, stale = model.copy(), -1.0, 0

    for epoch in range(epochs):
        lr = lr_schedule(epoch, cfg.lr0, cfg.lr_factor, cfg.lr_interval)
        order = rng.permutation(train_idx)
        loss_sum, correct, extras = 0.0, 0, {}
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            tensors = model.parameter_tensors()
            logits = model.forward(data.x[idx], training=True, rng=rng, tensors=tensors)
            loss, parts = loss_fn(logits, idx)
            loss.backward()
            grads = {n: t.grad for n, t in tensors.items() if t.grad is not None}
            rmsprop_step(model.params, grads, state, lr, cfg.rho, cfg.eps)

            loss_sum += loss.item() * len(idx)
            correct += int(np.sum(logits.data.argmax(axis=1) == data.y[idx]))
            for key, value in parts.items():
                extras[key] = extras.get(key, 0.0) + value * len(idx)

        val_loss, val_acc = evaluate_loss_acc(model, data, val_idx)
        row = {
            "epoch": epoch + 1,
            "lr": float(lr),
            "train_loss": float(loss_sum / len(order)),
            "val_loss": float(val_loss),
            "train_acc": float(correct / len(order)),
            "val_acc": float(val_acc),
        }
        row.update({key: float(total / len(order)) for key, total in extras.items()})
        history.append(row)
        logger.info(
            "[%s] epoch %d/%d lr=%.2e loss=%.4f val_loss=%.4f acc=%.3f val_acc=%.3f",
            label, epoch + 1, epochs, lr, row["train_loss"], val_loss, row["train_acc"], val_acc,
        )

        if val_acc > best_acc:
            best, best_acc, stale = model.copy(), val_acc, 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                logger.info("[%s] early stop after %d epochs without improvement", label, stale)
                break

    best.meta = dict(model.meta)
    return best, history


def supervised_loss(data: Dataset, n_classes: int) -> LossFn:
    def loss_fn(logits: Tensor, idx: np.ndarray):
        return softmax_cross_entropy(logits, one_hot(data.y[idx], n_classes)), {}

    return loss_fn


def train(
    spec: NetworkSpec,
    data: Dataset,
    cfg: Optional[TrainingConfig] = None,
    model: Optional[Model] = None,
    epochs: Optional[int] = None,
) -> Tuple[Model, History]:
    """Train from scratch (or continue training `model`).

    Raises:
        EmptyClass: A class has fewer than two samples.
        ShapeMismatch: Rasters or class count disagree with the spec.
    """
    cfg = cfg or TrainingConfig()
    check_dataset(spec, data)
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = Model.initialize(spec, rng)
    else:
        model = model.copy()
    split = stratified_split(data.y, cfg.val_fraction, rng, data.n_classes)
    logger.info(
        "Training %d params on %d/%d train/val samples", model.count_params(), len(split[0]), len(split[1])
    )
    return fit(model, data, split, cfg, rng, epochs or cfg.max_epochs, supervised_loss(data, spec.n_classes))


def write_history_csv(history: History, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(HISTORY_FIELDS)
    for row in history:
        fields.extend(k for k in row if k not in fields)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
