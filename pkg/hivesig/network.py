"""
Network specifications and the model container.

A `NetworkSpec` is an ordered list of `LayerSpec` entries. Shapes and
parameter counts follow from the spec alone; a `Model` pairs a spec with its
parameter arrays, batchnorm running statistics and any quantized tensors.
"""

import copy
import logging
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .autograd import (
    RunningStats,
    Tensor,
    batchnorm,
    conv2d,
    dense,
    dropout,
    flatten,
    maxpool2d,
    no_grad,
    relu,
    softmax,
)
from .config import NetworkConfig
from .errors import ShapeIncompatible, ShapeMismatch, UnknownLayer

logger = logging.getLogger(__name__)

N_CLASSES = 4
INPUT_SIZE = 64

Shape = Tuple[int, ...]


class LayerSpec(BaseModel):
    """One layer. Which fields matter depends on `kind`."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["conv", "maxpool", "relu", "dropout", "flatten", "dense"]
    name: str
    out_channels: Optional[int] = Field(None, ge=1)  # conv
    kernel: int = Field(3, ge=1)  # conv
    stride: int = Field(1, ge=1)  # conv
    pad: int = Field(1, ge=0)  # conv
    pool: int = Field(2, ge=1)  # maxpool
    p: float = Field(0.5, ge=0, lt=1)  # dropout
    units: Optional[int] = Field(None, ge=1)  # dense
    has_bn: bool = False  # conv, dense

    @model_validator(mode="after")
    def _required(self) -> "LayerSpec":
        if self.kind == "conv" and self.out_channels is None:
            raise ValueError(f"{self.name}: conv needs out_channels")
        if self.kind == "dense" and self.units is None:
            raise ValueError(f"{self.name}: dense needs units")
        return self

    @property
    def width(self) -> Optional[int]:
        """Output channels (conv) or units (dense)."""
        return self.out_channels if self.kind == "conv" else self.units


class NetworkSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    input_shape: Tuple[int, int, int] = (3, INPUT_SIZE, INPUT_SIZE)
    layers: List[LayerSpec]
    n_classes: int = N_CLASSES

    @model_validator(mode="after")
    def _unique_names(self) -> "NetworkSpec":
        names = [layer.name for layer in self.layers]
        if len(names) != len(set(names)):
            raise ValueError("layer names must be unique")
        return self

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise UnknownLayer(f"no layer named {name!r}")

    def index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise UnknownLayer(f"no layer named {name!r}")

    def infer_shapes(self) -> List[Shape]:
        """Output shape (without batch axis) after every layer.

        Raises:
            ShapeIncompatible: A layer cannot consume its predecessor's output,
                or the network does not end in `n_classes` logits.
        """
        shape: Shape = tuple(self.input_shape)
        shapes = []
        for layer in self.layers:
            shape = _layer_output(layer, shape)
            shapes.append(shape)
        if not self.layers or self.layers[-1].kind != "dense" or shape != (self.n_classes,):
            raise ShapeIncompatible(
                f"network must end in a dense layer with {self.n_classes} outputs, ends with {shape}",
                layer=self.layers[-1].name if self.layers else "",
            )
        return shapes

    def input_shapes(self) -> Dict[str, Shape]:
        """Shape each layer receives, keyed by layer name."""
        shapes = [tuple(self.input_shape)] + self.infer_shapes()[:-1]
        return {layer.name: s for layer, s in zip(self.layers, shapes)}

    def param_shapes(self) -> Dict[str, Shape]:
        """Learnable parameter shapes, in layer order."""
        out: Dict[str, Shape] = {}
        in_shapes = self.input_shapes()
        for layer in self.layers:
            out.update(layer_param_shapes(layer, in_shapes[layer.name]))
        return out

    def buffer_shapes(self) -> Dict[str, Shape]:
        """Batchnorm running statistics (not learnable)."""
        out: Dict[str, Shape] = {}
        for layer in self.layers:
            if layer.has_bn:
                out[f"{layer.name}.bn.mean"] = (layer.width,)
                out[f"{layer.name}.bn.var"] = (layer.width,)
        return out

    def count_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())


def _layer_output(layer: LayerSpec, shape: Shape) -> Shape:
    fail = lambda msg: ShapeIncompatible(f"{layer.name}: {msg}", layer=layer.name)  # noqa: E731
    if layer.kind == "conv":
        if len(shape) != 3:
            raise fail(f"conv needs a (C, H, W) input, got {shape}")
        _, h, w = shape
        ho = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
        wo = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise fail(f"kernel {layer.kernel} does not fit {h}x{w}")
        return (layer.out_channels, ho, wo)
    if layer.kind == "maxpool":
        if len(shape) != 3 or shape[1] % layer.pool or shape[2] % layer.pool:
            raise fail(f"maxpool({layer.pool}) cannot pool {shape}")
        return (shape[0], shape[1] // layer.pool, shape[2] // layer.pool)
    if layer.kind == "flatten":
        return (int(np.prod(shape)),)
    if layer.kind == "dense":
        if len(shape) != 1:
            raise fail(f"dense needs a flat input, got {shape}")
        return (layer.units,)
    return shape


def layer_param_shapes(layer: LayerSpec, in_shape: Shape) -> Dict[str, Shape]:
    """conv: out*in*k^2 + out; dense: out*in + out; bn: 2*channels."""
    out: Dict[str, Shape] = {}
    if layer.kind == "conv":
        out[f"{layer.name}.weight"] = (layer.out_channels, in_shape[0], layer.kernel, layer.kernel)
        out[f"{layer.name}.bias"] = (layer.out_channels,)
    elif layer.kind == "dense":
        out[f"{layer.name}.weight"] = (layer.units, in_shape[0])
        out[f"{layer.name}.bias"] = (layer.units,)
    if layer.has_bn:
        out[f"{layer.name}.bn.gamma"] = (layer.width,)
        out[f"{layer.name}.bn.beta"] = (layer.width,)
    return out


def layer_param_count(layer: LayerSpec, in_shape: Shape) -> int:
    return sum(int(np.prod(s)) for s in layer_param_shapes(layer, in_shape).values())


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def _feature_layers(widths: List[int]) -> List[LayerSpec]:
    """Eight 3x3 convs, batchnorm on the odd ones, a 2x2 pool after every second."""
    layers = []
    for i, width in enumerate(widths, start=1):
        layers.append(LayerSpec(kind="conv", name=f"conv{i}", out_channels=width, has_bn=(i % 2 == 1)))
        layers.append(LayerSpec(kind="relu", name=f"relu{i}"))
        if i % 2 == 0:
            layers.append(LayerSpec(kind="maxpool", name=f"pool{i // 2}", pool=2))
    return layers


def build_head(hidden: int = 64, p: float = 0.5, n_classes: int = N_CLASSES) -> List[LayerSpec]:
    """dropout -> flatten -> dense(hidden)+bn -> dropout -> dense(n_classes)+bn.

    Softmax is applied on top of the logits at prediction time.
    """
    return [
        LayerSpec(kind="dropout", name="drop1", p=p),
        LayerSpec(kind="flatten", name="flatten"),
        LayerSpec(kind="dense", name="fc1", units=hidden, has_bn=True),
        LayerSpec(kind="dropout", name="drop2", p=p),
        LayerSpec(kind="dense", name="fc2", units=n_classes, has_bn=True),
    ]


HEAD_LAYERS = ("drop1", "flatten", "fc1", "drop2", "fc2")


def _build(widths: List[int], cfg: NetworkConfig, channels: int, n_classes: int) -> NetworkSpec:
    hidden = cfg.compact_head_hidden if cfg.compact_head else cfg.head_hidden
    spec = NetworkSpec(
        input_shape=(channels, INPUT_SIZE, INPUT_SIZE),
        layers=_feature_layers(widths) + build_head(hidden, cfg.head_dropout, n_classes),
        n_classes=n_classes,
    )
    spec.infer_shapes()
    return spec


def build_teacher(
    cfg: Optional[NetworkConfig] = None, channels: int = 3, preset: str = "default", n_classes: int = N_CLASSES
) -> NetworkSpec:
    """Eight-conv teacher; `preset="large"` selects the ~5.65M-parameter widths."""
    cfg = cfg or NetworkConfig()
    widths = cfg.large_teacher_widths if preset == "large" else cfg.teacher_widths
    return _build(widths, cfg, channels, n_classes)


def build_student(cfg: Optional[NetworkConfig] = None, channels: int = 3, n_classes: int = N_CLASSES) -> NetworkSpec:
    cfg = cfg or NetworkConfig()
    return _build(cfg.student_widths, cfg, channels, n_classes)


ARCHITECTURES = ("teacher", "student", "large-teacher")


def build_spec(
    arch: str, cfg: Optional[NetworkConfig] = None, channels: int = 3, n_classes: int = N_CLASSES
) -> NetworkSpec:
    if arch == "teacher":
        return build_teacher(cfg, channels, n_classes=n_classes)
    if arch == "student":
        return build_student(cfg, channels, n_classes)
    if arch == "large-teacher":
        return build_teacher(cfg, channels, preset="large", n_classes=n_classes)
    raise UnknownLayer(f"unknown architecture {arch!r}")


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class Model:
    """Spec + float32 parameters + running stats + quantized tensors.

    A quantized tensor lives in `quantized` as (integer array, QuantParams)
    and is absent from `params`; `weights()` dequantizes it on the fly.
    """

    def __init__(
        self,
        spec: NetworkSpec,
        params: Dict[str, np.ndarray],
        running: Optional[Dict[str, np.ndarray]] = None,
        quantized: Optional[Dict[str, Tuple[np.ndarray, Any]]] = None,
        meta: Optional[Dict[str, Any]] = None,
    ):
        self.spec = spec
        self.params = params
        self.running = running if running is not None else {}
        self.quantized = quantized if quantized is not None else {}
        self.meta = meta if meta is not None else {}
        self.validate()

    @classmethod
    def initialize(cls, spec: NetworkSpec, seed: Union[int, np.random.Generator] = 0) -> "Model":
        """He-normal weights, zero biases, unit gamma, zero beta."""
        rng = np.random.default_rng(seed)
        params: Dict[str, np.ndarray] = {}
        for name, shape in spec.param_shapes().items():
            if name.endswith(".weight"):
                fan_in = int(np.prod(shape[1:]))
                params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
            elif name.endswith(".bn.gamma"):
                params[name] = np.ones(shape, dtype=np.float32)
            else:
                params[name] = np.zeros(shape, dtype=np.float32)
        running = {}
        for name, shape in spec.buffer_shapes().items():
            running[name] = (np.zeros if name.endswith(".mean") else np.ones)(shape, dtype=np.float32)
        return cls(spec, params, running)

    def validate(self) -> None:
        """Every learnable parameter exists exactly once with the spec's shape."""
        expected = self.spec.param_shapes()
        stored = {n: a.shape for n, a in self.params.items()}
        stored.update({n: q.shape for n, (q, _) in self.quantized.items()})
        if set(stored) != set(expected):
            missing = sorted(set(expected) - set(stored))
            extra = sorted(set(stored) - set(expected))
            raise ShapeIncompatible(f"parameter set mismatch (missing {missing}, extra {extra})")
        for name, shape in expected.items():
            if tuple(stored[name]) != tuple(shape):
                layer = name.split(".")[0]
                raise ShapeIncompatible(
                    f"{name}: stored shape {tuple(stored[name])} but spec needs {shape}", layer=layer
                )
        for name, shape in self.spec.buffer_shapes().items():
            if name not in self.running or self.running[name].shape != shape:
                raise ShapeIncompatible(f"running statistic {name} missing or misshaped")

    def copy(self) -> "Model":
        return Model(
            self.spec.model_copy(deep=True),
            {n: a.copy() for n, a in self.params.items()},
            {n: a.copy() for n, a in self.running.items()},
            {n: (q.copy(), qp) for n, (q, qp) in self.quantized.items()},
            copy.deepcopy(self.meta),
        )

    def weights(self) -> Dict[str, np.ndarray]:
        """All learnable tensors as float32, quantized ones dequantized."""
        from .quantization import dequantize

        out = dict(self.params)
        for name, (q, qp) in self.quantized.items():
            out[name] = dequantize(q, qp).astype(np.float32)
        return out

    def parameter_tensors(self) -> Dict[str, Tensor]:
        """Gradient-tracking views over `params` for one training step."""
        return {name: Tensor(a, requires_grad=True) for name, a in self.params.items()}

    def count_params(self) -> int:
        return self.spec.count_params()

    def forward(
        self,
        x,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        tensors: Optional[Dict[str, Tensor]] = None,
        shapes: Optional[List[Tuple[str, Shape]]] = None,
        until: Optional[str] = None,
    ) -> Tensor:
        """Logits for an (N, C, 64, 64) batch.

        Args:
            x: Input batch (array or Tensor).
            training: Batch statistics and active dropout when True.
            rng: Dropout generator (training only).
            tensors: Parameter tensors to differentiate against; when None the
                model's weights are wrapped without gradient tracking.
            shapes: When given, (layer name, output shape) is appended per layer.
            until: Stop after the named layer and return its output.
        """
        if until is not None:
            self.spec.index(until)
        h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        if tuple(h.shape[1:]) != tuple(self.spec.input_shape):
            raise ShapeMismatch(f"input {tuple(h.shape[1:])} does not match spec {self.spec.input_shape}")
        if tensors is None:
            tensors = {name: Tensor(a) for name, a in self.weights().items()}

        for layer in self.spec.layers:
            n = layer.name
            if layer.kind == "conv":
                h = conv2d(h, tensors[f"{n}.weight"], tensors[f"{n}.bias"], layer.stride, layer.pad)
            elif layer.kind == "dense":
                h = dense(h, tensors[f"{n}.weight"], tensors[f"{n}.bias"])
            elif layer.kind == "maxpool":
                h = maxpool2d(h, layer.pool)
            elif layer.kind == "relu":
                h = relu(h)
            elif layer.kind == "dropout":
                h = dropout(h, layer.p, rng, training)
            elif layer.kind == "flatten":
                h = flatten(h)
            if layer.has_bn:
                stats = RunningStats(self.running[f"{n}.bn.mean"], self.running[f"{n}.bn.var"])
                h = batchnorm(h, tensors[f"{n}.bn.gamma"], tensors[f"{n}.bn.beta"], stats, training)
            if shapes is not None:
                shapes.append((n, tuple(h.shape[1:])))
            if n == until:
                break
        return h

    def predict_logits(self, x: np.ndarray, batch_size: int = 64, until: Optional[str] = None) -> np.ndarray:
        """Eval-mode outputs (logits, or the `until` layer's activations), batched."""
        x = np.asarray(x, dtype=np.float32)
        out = []
        with no_grad():
            for start in range(0, len(x), batch_size):
                out.append(self.forward(x[start:start + batch_size], training=False, until=until).data)
        if not out:
            return np.zeros((0, self.spec.n_classes), dtype=np.float32)
        return np.concatenate(out)

    def predict_proba(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Eval-mode class probabilities, shape (N, n_classes)."""
        return softmax(self.predict_logits(x, batch_size).astype(np.float64))

    def predict(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        return self.predict_proba(x, batch_size).argmax(axis=1)


def count_params(obj: Union[NetworkSpec, Model, List[LayerSpec]], in_shape: Optional[Shape] = None) -> int:
    """Learnable parameters of a spec, a model, or a bare layer list.

    A layer list needs the shape it receives (e.g. (256, 4, 4) for the head).
    """
    if isinstance(obj, Model):
        return obj.count_params()
    if isinstance(obj, NetworkSpec):
        return obj.count_params()
    if in_shape is None:
        raise ShapeMismatch("counting a bare layer list needs its input shape")
    total, shape = 0, tuple(in_shape)
    for layer in obj:
        total += layer_param_count(layer, shape)
        shape = _layer_output(layer, shape)
    return total
