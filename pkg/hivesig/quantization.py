"""
Asymmetric affine quantization.

    S = (x_max - x_min) / (q_max - q_min)
    Z = round(q_min - x_min / S)
    q = clamp(round(x / S + Z), q_min, q_max)
    x ~= S * (q - Z)

Rounding is half away from zero everywhere.
"""

from dataclasses import asdict, dataclass
from typing import Any, Dict, Iterable, Union

import numpy as np

from .errors import EmptyCalibration, InputError

# Stored per quantized tensor: scale f32, zero point i32, q_min i32, q_max i32
QPARAMS_OVERHEAD_BYTES = 16


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    q_min: int = -128
    q_max: int = 127
    x_min: float = 0.0
    x_max: float = 0.0

    def __post_init__(self):
        if self.q_min >= self.q_max:
            raise InputError(f"q_min {self.q_min} must be < q_max {self.q_max}")
        if not self.scale > 0:
            raise InputError(f"scale must be > 0, got {self.scale}")

    @property
    def dtype(self) -> np.dtype:
        if self.q_min >= -128 and self.q_max <= 127:
            return np.dtype(np.int8)
        if self.q_min >= 0 and self.q_max <= 255:
            return np.dtype(np.uint8)
        return np.dtype(np.int32)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "QuantParams":
        return cls(
            scale=float(data["scale"]),
            zero_point=int(data["zero_point"]),
            q_min=int(data["q_min"]),
            q_max=int(data["q_max"]),
            x_min=float(data.get("x_min", 0.0)),
            x_max=float(data.get("x_max", 0.0)),
        )


def round_half_away(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def calibrate(
    tensors: Union[np.ndarray, Iterable[np.ndarray]],
    q_min: int = -128,
    q_max: int = 127,
) -> QuantParams:
    """Min/max calibration over one array or several.

    S = (x_max - x_min) / (q_max - q_min) and Z = round(q_min - x_min / S),
    with [x_min, x_max] the observed range widened to contain 0 before S is
    computed. Zero is exactly representable and Z never needs clamping; a
    one-signed tensor gets a coarser S than its raw range would give.

    Raises:
        EmptyCalibration: No values to calibrate on.
    """
    if isinstance(tensors, np.ndarray):
        tensors = [tensors]
    flat = [np.asarray(t, dtype=np.float64).ravel() for t in tensors]
    flat = [f for f in flat if f.size]
    if not flat:
        raise EmptyCalibration("calibration set is empty")
    values = np.concatenate(flat)
    if not np.all(np.isfinite(values)):
        raise EmptyCalibration("calibration set contains non-finite values")

    x_min = min(float(values.min()), 0.0)
    x_max = max(float(values.max()), 0.0)
    if x_max == x_min:
        return QuantParams(scale=1.0, zero_point=q_min, q_min=q_min, q_max=q_max, x_min=x_min, x_max=x_max)

    scale = (x_max - x_min) / (q_max - q_min)
    zero_point = int(round_half_away(q_min - x_min / scale))
    zero_point = min(max(zero_point, q_min), q_max)
    return QuantParams(
        scale=scale, zero_point=zero_point, q_min=q_min, q_max=q_max, x_min=x_min, x_max=x_max
    )


def quantize(x, qp: QuantParams) -> np.ndarray:
    """Saturating affine quantization to the narrowest integer dtype of the range."""
    q = round_half_away(np.asarray(x, dtype=np.float64) / qp.scale + qp.zero_point)
    return np.clip(q, qp.q_min, qp.q_max).astype(qp.dtype)


def dequantize(q, qp: QuantParams) -> np.ndarray:
    return qp.scale * (np.asarray(q, dtype=np.float64) - qp.zero_point)
