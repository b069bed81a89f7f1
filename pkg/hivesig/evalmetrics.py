"""
Evaluation metrics and the latency benchmark.

Multiclass scores are one-vs-rest per class, aggregated as macro and
support-weighted averages. F1 = TP / (TP + 0.5 (FP + FN)); 0/0 is 0.
"""

import csv
import json
import logging
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .errors import EmptyDataset, EmptyMatrix, InputError, LengthMismatch, OutOfRangeClass
from .network import Model

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
MIN_BENCH_RUNS = 3


@dataclass
class ConfusionMatrix:
    """counts[true, predicted]."""

    counts: np.ndarray
    class_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = self.counts.shape[0]
        if self.counts.shape != (k, k) or np.any(self.counts < 0):
            raise EmptyMatrix(f"confusion matrix must be square and non-negative, got {self.counts.shape}")
        if not self.class_names:
            self.class_names = [str(i) for i in range(k)]

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def confusion_matrix(preds, labels, k: int, class_names: Optional[List[str]] = None) -> ConfusionMatrix:
    """Tally (label, prediction) pairs.

    Raises:
        LengthMismatch: preds and labels differ in length.
        OutOfRangeClass: An id lies outside [0, k).
    """
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise LengthMismatch(f"{len(preds)} predictions vs {len(labels)} labels")
    for name, ids in (("prediction", preds), ("label", labels)):
        if ids.size and (ids.min() < 0 or ids.max() >= k):
            raise OutOfRangeClass(f"{name} ids must lie in [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts, list(class_names) if class_names else [])


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise EmptyMatrix("accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def per_class_scores(cm: ConfusionMatrix) -> Dict[str, np.ndarray]:
    """One-vs-rest precision, recall and F1 for every class."""
    if cm.total == 0:
        raise EmptyMatrix("scores of an empty confusion matrix")
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    return {
        "precision": _ratio(tp, tp + fp),
        "recall": _ratio(tp, tp + fn),
        "f1": _ratio(tp, tp + 0.5 * (fp + fn)),
    }


def f1_per_class(cm: ConfusionMatrix) -> List[float]:
    return per_class_scores(cm)["f1"].tolist()


def report(cm: ConfusionMatrix) -> Dict[str, Any]:
    """Classification report with macro and support-weighted averages."""
    scores = per_class_scores(cm)
    support = cm.support.astype(np.float64)
    warnings = []
    classes = []
    for i, name in enumerate(cm.class_names):
        tp = cm.counts[i, i]
        if tp == 0 and cm.counts[:, i].sum() == 0 and cm.counts[i, :].sum() == 0:
            warnings.append(f"class {name!r} has no samples and no predictions; F1 set to 0")
        elif cm.counts[:, i].sum() == 0:
            warnings.append(f"class {name!r} was never predicted; precision set to 0")
        classes.append(
            {
                "class": name,
                "precision": float(scores["precision"][i]),
                "recall": float(scores["recall"][i]),
                "f1": float(scores["f1"][i]),
                "support": int(cm.support[i]),
            }
        )
    for message in warnings:
        logger.warning(message)

    def weighted(values: np.ndarray) -> float:
        return float((values * support).sum() / support.sum())

    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "classes": classes,
        "accuracy": accuracy(cm),
        "macro_avg": {k: float(v.mean()) for k, v in scores.items()},
        "weighted_avg": {k: weighted(v) for k, v in scores.items()},
        "total": cm.total,
        "confusion_matrix": cm.counts.tolist(),
        "class_names": list(cm.class_names),
        "warnings": warnings,
    }


classification_report = report


@dataclass
class BenchReport:
    model_name: str
    accuracy: float
    size_bytes: int
    params: int
    inference_seconds: float
    runs: int
    samples: int
    timings: List[float] = field(default_factory=list)
    environment: Dict[str, Any] = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def environment_info() -> Dict[str, Any]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "system": platform.system(),
        "cpu_count": os.cpu_count(),
        "threads": os.environ.get("OMP_NUM_THREADS"),
    }


def benchmark(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    runs: int = 5,
    model_name: str = "model",
    batch_size: int = 64,
) -> BenchReport:
    """Median wall-clock time of a full-dataset forward pass.

    Raises:
        InputError: Fewer than three runs.
        EmptyDataset: No samples.
    """
    from .compress import size_report

    if runs < MIN_BENCH_RUNS:
        raise InputError(f"benchmark needs at least {MIN_BENCH_RUNS} runs, got {runs}")
    x = np.asarray(x, dtype=np.float32)
    if len(x) == 0:
        raise EmptyDataset("benchmark dataset is empty")

    timings = []
    for _ in range(runs):
        start = time.perf_counter()
        logits = model.predict_logits(x, batch_size)
        timings.append(time.perf_counter() - start)
    preds = logits.argmax(axis=1)
    acc = float(np.mean(preds == np.asarray(y)))
    median = float(np.median(timings))
    logger.info("Benchmark %s: median %.4fs over %d runs, accuracy %.4f", model_name, median, runs, acc)
    return BenchReport(
        model_name=model_name,
        accuracy=acc,
        size_bytes=size_report(model).bytes,
        params=model.count_params(),
        inference_seconds=median,
        runs=runs,
        samples=int(len(x)),
        timings=timings,
        environment=environment_info(),
    )


def write_json(data: Dict[str, Any], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def write_report_csv(rep: Dict[str, Any], path: Path) -> None:
    """Per-class rows followed by macro and weighted averages."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["class", "precision", "recall", "f1", "support"])
        for row in rep["classes"]:
            writer.writerow([row["class"], row["precision"], row["recall"], row["f1"], row["support"]])
        for key in ("macro_avg", "weighted_avg"):
            avg = rep[key]
            writer.writerow([key, avg["precision"], avg["recall"], avg["f1"], rep["total"]])
        writer.writerow(["accuracy", "", "", rep["accuracy"], rep["total"]])


def write_rows_csv(rows: Sequence[Dict[str, Any]], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields: List[str] = []
    for row in rows:
        fields.extend(k for k in row if k not in fields)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
