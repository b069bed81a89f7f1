"""
Model compression

This module:
1. Removes whole conv channels / dense units (neuron pruning)
2. Removes whole conv layers (layer pruning)
3. Trains a student against a teacher's softened outputs (distillation)
4. Quantizes the classification head to 8-bit integers
5. Accounts for parameter counts and storage size
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autograd import Tensor, cross_entropy, one_hot, softmax, softmax_cross_entropy
from .config import DistillConfig, QuantConfig
from .errors import (
    EmptyCalibration,
    InputError,
    InvalidFraction,
    InvalidTemperature,
    ShapeIncompatible,
    ShapeMismatch,
    UnknownLayer,
)
from .network import Model, NetworkSpec, layer_param_count
from .quantization import QPARAMS_OVERHEAD_BYTES, calibrate, dequantize, quantize
from .training import Dataset, History, check_dataset, fit, stratified_split

logger = logging.getLogger(__name__)

HEAD_PARAM_LAYERS = ("fc1", "fc2")
BYTES_PER_F32 = 4
MB = 1_000_000
MIB = 1 << 20


# ---------------------------------------------------------------------------
# Size accounting
# ---------------------------------------------------------------------------

@dataclass
class SizeReport:
    """Learnable-parameter storage; running statistics reported apart."""

    bytes: int
    params: int
    buffer_bytes: int
    layers: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def mb(self) -> float:
        return self.bytes / MB

    @property
    def mib(self) -> float:
        return self.bytes / MIB

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["mb"] = self.mb
        out["mib"] = self.mib
        return out


def tensor_size_report(
    params: Dict[str, np.ndarray],
    quantized: Optional[Dict[str, Tuple[np.ndarray, Any]]] = None,
    running: Optional[Dict[str, np.ndarray]] = None,
) -> SizeReport:
    """f32 tensors cost 4 B/param; quantized ones 1 B/param plus 16 B of QuantParams."""
    quantized = quantized or {}
    per_layer: Dict[str, Dict[str, Any]] = {}

    def add(name: str, n: int, nbytes: int, kind: str) -> None:
        layer = name.split(".")[0]
        row = per_layer.setdefault(layer, {"layer": layer, "params": 0, "bytes": 0, "dtypes": []})
        row["params"] += n
        row["bytes"] += nbytes
        if kind not in row["dtypes"]:
            row["dtypes"].append(kind)

    for name, a in params.items():
        add(name, int(a.size), int(a.size) * BYTES_PER_F32, "f32")
    for name, (q, _) in quantized.items():
        add(name, int(q.size), int(q.size) * q.dtype.itemsize + QPARAMS_OVERHEAD_BYTES, "q8")

    buffer_bytes = sum(int(a.size) * BYTES_PER_F32 for a in (running or {}).values())
    layers = list(per_layer.values())
    return SizeReport(
        bytes=sum(r["bytes"] for r in layers),
        params=sum(r["params"] for r in layers),
        buffer_bytes=buffer_bytes,
        layers=layers,
    )


def size_report(model: Model) -> SizeReport:
    return tensor_size_report(model.params, model.quantized, model.running)


def quantized_size_estimate(model_mb: float, head_mb: float, ratio: float = 0.25) -> float:
    """Model size after replacing an f32 head with its int8 copy: M - H + ratio*H."""
    return model_mb - head_mb + head_mb * ratio


# ---------------------------------------------------------------------------
# Pruning
# ---------------------------------------------------------------------------

@dataclass
class PruneReport:
    removed_units: Dict[str, int] = field(default_factory=dict)
    removed_layers: List[str] = field(default_factory=list)
    layer_deltas: Dict[str, int] = field(default_factory=dict)
    params_before: int = 0
    params_after: int = 0
    size_before: int = 0
    size_after: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _require_float(model: Model, action: str) -> None:
    if model.quantized:
        raise InputError(f"cannot {action} a model with quantized tensors")


def prunable_layers(spec: NetworkSpec) -> List[str]:
    """Conv layers and hidden dense layers; the final class layer is never prunable."""
    last = spec.layers[-1].name
    return [ly.name for ly in spec.layers if ly.kind in ("conv", "dense") and ly.name != last]


def _next_parametric(spec: NetworkSpec, name: str) -> Tuple[str, bool]:
    """Next conv/dense after `name`, and whether a flatten sits in between."""
    seen_flatten = False
    for layer in spec.layers[spec.index(name) + 1:]:
        if layer.kind == "flatten":
            seen_flatten = True
        if layer.kind in ("conv", "dense"):
            return layer.name, seen_flatten
    raise ShapeIncompatible(f"{name} has no downstream parametric layer", layer=name)


def _unit_scores(model: Model, name: str) -> np.ndarray:
    w = model.params[f"{name}.weight"]
    return np.abs(w).reshape(w.shape[0], -1).sum(axis=1)


def prune_neurons(
    model: Model,
    fraction: float,
    strategy: str = "random",
    seed: int = 0,
    layers: Optional[Sequence[str]] = None,
) -> Tuple[Model, PruneReport]:
    """Structurally remove floor(fraction * width) units from each prunable layer.

    Removed units take their outgoing filter/row, their bias and batchnorm
    entries, and the next layer's matching input columns with them.

    Raises:
        InvalidFraction: fraction outside [0, 1).
    """
    if not 0.0 <= fraction < 1.0:
        raise InvalidFraction(f"prune fraction must be in [0, 1), got {fraction}")
    if strategy not in ("random", "magnitude"):
        raise InputError(f"unknown pruning strategy {strategy!r}")
    _require_float(model, "prune")

    targets = list(layers) if layers is not None else prunable_layers(model.spec)
    allowed = set(prunable_layers(model.spec))
    for name in targets:
        model.spec.layer(name)
        if name not in allowed:
            raise ShapeIncompatible(f"{name} is not a prunable layer", layer=name)

    rng = np.random.default_rng(seed)
    out = model.copy()
    flatten_in = model.spec.input_shapes().get("flatten")
    report = PruneReport(params_before=model.count_params(), size_before=size_report(model).bytes)
    layer_list = list(out.spec.layers)

    for name in [ly.name for ly in model.spec.layers if ly.name in targets]:
        idx = [ly.name for ly in layer_list].index(name)
        layer = layer_list[idx]
        units = layer.width
        n_remove = int(np.floor(fraction * units))
        if n_remove == 0:
            continue
        keep_n = units - n_remove
        if strategy == "random":
            keep = np.sort(rng.choice(units, size=keep_n, replace=False))
        else:
            order = np.argsort(-_unit_scores(out, name), kind="stable")
            keep = np.sort(order[:keep_n])

        for suffix in (".weight", ".bias", ".bn.gamma", ".bn.beta"):
            key = name + suffix
            if key in out.params:
                out.params[key] = out.params[key][keep].copy()
        for suffix in (".bn.mean", ".bn.var"):
            key = name + suffix
            if key in out.running:
                out.running[key] = out.running[key][keep].copy()

        nxt, through_flatten = _next_parametric(out.spec, name)
        w = out.params[f"{nxt}.weight"]
        if through_flatten:
            hw = int(flatten_in[1] * flatten_in[2])
            cols = (keep[:, None] * hw + np.arange(hw)[None, :]).ravel()
            out.params[f"{nxt}.weight"] = w[:, cols].copy()
        else:
            out.params[f"{nxt}.weight"] = w[:, keep].copy()

        field_name = "out_channels" if layer.kind == "conv" else "units"
        layer_list[idx] = layer.model_copy(update={field_name: keep_n})
        out.spec = NetworkSpec(input_shape=out.spec.input_shape, layers=layer_list, n_classes=out.spec.n_classes)
        report.removed_units[name] = n_remove

    out.validate()
    report.params_after = out.count_params()
    report.size_after = size_report(out).bytes
    logger.info(
        "Neuron pruning (%s, %.3f): %d -> %d params", strategy, fraction, report.params_before, report.params_after
    )
    return out, report


def prune_layers(model: Model, names: Sequence[str]) -> Tuple[Model, PruneReport]:
    """Delete conv layers (with their batchnorm and following ReLU).

    Raises:
        UnknownLayer: A name is not in the network.
        ShapeIncompatible(layer): Removal leaves neighbouring layers disagreeing.
    """
    _require_float(model, "prune")
    report = PruneReport(params_before=model.count_params(), size_before=size_report(model).bytes)
    out = model.copy()

    for name in names:
        layer = out.spec.layer(name)
        if layer.kind != "conv":
            raise ShapeIncompatible(f"{name}: only conv layers can be removed", layer=name)
        in_shape = out.spec.input_shapes()[name]
        i = out.spec.index(name)
        drop = {name}
        if i + 1 < len(out.spec.layers) and out.spec.layers[i + 1].kind == "relu":
            drop.add(out.spec.layers[i + 1].name)
        remaining = [ly for ly in out.spec.layers if ly.name not in drop]

        try:
            spec = NetworkSpec(input_shape=out.spec.input_shape, layers=remaining, n_classes=out.spec.n_classes)
            spec.infer_shapes()
        except ShapeIncompatible as exc:
            raise ShapeIncompatible(f"removing {name}: {exc}", layer=name) from exc

        params = {k: v for k, v in out.params.items() if k.split(".")[0] != name}
        running = {k: v for k, v in out.running.items() if k.split(".")[0] != name}
        expected = spec.param_shapes()
        for key, shape in expected.items():
            if tuple(params[key].shape) != tuple(shape):
                raise ShapeIncompatible(
                    f"removing {name} feeds {tuple(params[key].shape)} weights with {shape} inputs", layer=name
                )

        delta = layer_param_count(layer, in_shape)
        out = Model(spec, params, running, {}, out.meta)
        report.removed_layers.append(name)
        report.layer_deltas[name] = delta

    report.params_after = out.count_params()
    report.size_after = size_report(out).bytes
    logger.info("Layer pruning %s: %d -> %d params", list(names), report.params_before, report.params_after)
    return out, report


# ---------------------------------------------------------------------------
# Distillation
# ---------------------------------------------------------------------------

def softmax_with_temperature(logits, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise InvalidTemperature(f"temperature must be > 0, got {temperature}")
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    return softmax(np.asarray(logits, dtype=np.float64) / temperature)


def distillation_loss(student_probs, teacher_probs) -> float:
    """Cross-entropy of the student's soft distribution against the teacher's."""
    return cross_entropy(student_probs, teacher_probs)


def total_loss(student_logits, labels, teacher_probs, alpha: float, beta: float, temperature: float) -> float:
    """alpha * distill(student at T, teacher at T) + beta * CE(student at T=1, labels)."""
    student_logits = np.asarray(student_logits, dtype=np.float64)
    teacher_probs = np.asarray(teacher_probs, dtype=np.float64)
    if student_logits.shape != teacher_probs.shape:
        raise ShapeMismatch(f"student {student_logits.shape} vs teacher {teacher_probs.shape}")
    labels = np.atleast_1d(labels)
    target = one_hot(labels, student_logits.shape[-1])
    if student_logits.ndim == 1:
        target = target[0]
    distill = distillation_loss(softmax_with_temperature(student_logits, temperature), teacher_probs)
    gt = cross_entropy(softmax(student_logits), target)
    return alpha * distill + beta * gt


def distill(
    teacher: Model,
    student_spec: NetworkSpec,
    data: Dataset,
    cfg: Optional[DistillConfig] = None,
) -> Tuple[Model, History]:
    """Train a fresh student on alpha * distill + beta * ground-truth loss.

    The teacher runs once, in eval mode and without gradient tracking.
    """
    cfg = cfg or DistillConfig()
    check_dataset(student_spec, data)
    check_dataset(teacher.spec, data)

    teacher_soft = softmax_with_temperature(teacher.predict_logits(data.x), cfg.temperature)
    labels = one_hot(data.y, student_spec.n_classes)

    rng = np.random.default_rng(cfg.training.seed)
    student = Model.initialize(student_spec, rng)
    student.meta = dict(teacher.meta)
    split = stratified_split(data.y, cfg.training.val_fraction, rng, data.n_classes)

    def loss_fn(logits: Tensor, idx: np.ndarray):
        soft = softmax_cross_entropy(logits, teacher_soft[idx], cfg.temperature)
        hard = softmax_cross_entropy(logits, labels[idx])
        loss = soft * cfg.alpha + hard * cfg.beta
        return loss, {"distill_loss": soft.item(), "gt_loss": hard.item()}

    logger.info(
        "Distilling into %d params (T=%g, alpha=%g, beta=%g)",
        student.count_params(), cfg.temperature, cfg.alpha, cfg.beta,
    )
    return fit(student, data, split, cfg.training, rng, cfg.epochs, loss_fn, label="distill")


# ---------------------------------------------------------------------------
# Head quantization
# ---------------------------------------------------------------------------

def head_param_names(model: Model) -> List[str]:
    names = [n for n in model.spec.param_shapes() if n.split(".")[0] in HEAD_PARAM_LAYERS]
    if not names:
        raise UnknownLayer("model has no classification head (fc1/fc2)")
    return names


def quantize_head(model: Model, calibration_x: np.ndarray, cfg: Optional[QuantConfig] = None) -> Model:
    """Store every head tensor as int8 + per-tensor QuantParams.

    Weight ranges come from the weights themselves. The calibration rasters
    record the head's input activation range and the float/quantized
    prediction agreement in `meta["quantization"]`.

    Raises:
        EmptyCalibration: No calibration rasters.
    """
    cfg = cfg or QuantConfig()
    calibration_x = np.asarray(calibration_x, dtype=np.float32)
    if calibration_x.size == 0 or len(calibration_x) == 0:
        raise EmptyCalibration("quantize_head needs at least one calibration raster")

    out = model.copy()
    for name in head_param_names(model):
        if name in out.quantized:
            continue
        values = out.params.pop(name)
        qp = calibrate(values, cfg.q_min, cfg.q_max)
        out.quantized[name] = (quantize(values, qp), qp)
        err = float(np.max(np.abs(dequantize(out.quantized[name][0], qp) - values))) if values.size else 0.0
        logger.debug("%s: S=%.3e Z=%d max_err=%.3e", name, qp.scale, qp.zero_point, err)

    first_head = model.spec.layers[model.spec.index(HEAD_PARAM_LAYERS[0]) - 1].name
    activations = model.predict_logits(calibration_x, until=first_head)
    agree = float(np.mean(model.predict(calibration_x) == out.predict(calibration_x)))
    out.meta = dict(out.meta)
    out.meta["quantization"] = {
        "scheme": "per-tensor asymmetric",
        "q_min": cfg.q_min,
        "q_max": cfg.q_max,
        "tensors": sorted(out.quantized),
        "calibration_samples": int(len(calibration_x)),
        "head_input_range": [float(activations.min()), float(activations.max())],
        "agreement": agree,
    }
    logger.info(
        "Quantized %d head tensors; float/int8 agreement %.3f on %d samples",
        len(out.quantized), agree, len(calibration_x),
    )
    return out
