"""Configuration models and YAML loading.

Every stage of the pipeline is configured through one of the pydantic models
below. `PipelineConfig` aggregates them and is what `hivesig.yaml` maps onto.
"""

from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import InputError

# Paths relative to project root
PROJECT_ROOT = Path(__file__).parent.parent
DEFAULT_CONFIG_FILE = PROJECT_ROOT / "hivesig.yaml"

Representation = Literal["spectrogram", "mel", "smoothed", "cochleagram"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class AudioConfig(_Section):
    """Decoding and segmentation settings."""

    target_rate: int = Field(16000, gt=0)
    segment_seconds: float = Field(60.0, gt=0)


class AugmentConfig(_Section):
    """Augmented copies generated per segment during featurization."""

    copies_per_clip: int = Field(0, ge=0)
    pitch_semitones: List[float] = [-2.0, 2.0]
    stretch_factors: List[float] = [0.9, 1.1]
    speed_factors: List[float] = [0.9, 1.1]
    max_semitones: float = Field(12.0, gt=0)
    seed: int = 0

    @field_validator("stretch_factors", "speed_factors")
    @classmethod
    def _positive(cls, values: List[float]) -> List[float]:
        if any(v <= 0 for v in values):
            raise ValueError("factors must be > 0")
        return values

    @model_validator(mode="after")
    def _semitone_cap(self) -> "AugmentConfig":
        if any(abs(s) > self.max_semitones for s in self.pitch_semitones):
            raise ValueError(f"pitch shifts must stay within ±{self.max_semitones} semitones")
        return self


class StftConfig(_Section):
    """Frame length N, hop M and window w[n] of the short-time transform."""

    n_fft: int = 1024
    hop: int = 512
    window: Literal["hann", "rectangular"] = "hann"
    log_floor: float = Field(1e-10, gt=0)

    @field_validator("n_fft")
    @classmethod
    def _power_of_two(cls, n: int) -> int:
        if n <= 0 or n & (n - 1):
            raise ValueError("n_fft must be a positive power of two")
        return n

    @model_validator(mode="after")
    def _hop_range(self) -> "StftConfig":
        if not 0 < self.hop <= self.n_fft:
            raise ValueError("hop must satisfy 0 < hop <= n_fft")
        return self


class MelConfig(_Section):
    n_mels: int = Field(64, ge=1)
    f_min: float = Field(0.0, ge=0)
    f_max: Optional[float] = None  # None means Nyquist


class SmoothingConfig(_Section):
    """Moving-average window sizes: frames along time, bins along frequency."""

    time_window: int = 5
    freq_window: int = 5

    @field_validator("time_window", "freq_window")
    @classmethod
    def _odd(cls, n: int) -> int:
        if n < 1 or n % 2 == 0:
            raise ValueError("smoothing windows must be odd and >= 1")
        return n


class GammatoneConfig(_Section):
    """Gammatone filterbank and energy-integration settings."""

    n_channels: int = Field(32, ge=1)
    f_min: float = Field(20.0, gt=0)
    order: int = Field(4, ge=1)
    bandwidth_scale: float = Field(1.019, gt=0)
    phase: float = 0.0
    amplitude: Optional[float] = None  # None: unit peak magnitude response
    win_time: float = 0.025
    hop_time: float = 0.010
    ir_duration: float = Field(0.128, gt=0)
    log_floor: float = Field(1e-10, gt=0)

    @model_validator(mode="after")
    def _times(self) -> "GammatoneConfig":
        if not self.win_time > self.hop_time > 0:
            raise ValueError("need win_time > hop_time > 0")
        return self


class TrainingConfig(_Section):
    """RMSprop settings and the step learning-rate schedule."""

    lr0: float = Field(1e-3, ge=0)
    rho: float = Field(0.9, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    max_epochs: int = Field(250, ge=1)
    lr_factor: float = Field(0.5, gt=0, le=1)
    lr_interval: int = Field(6, ge=1)
    batch_size: int = Field(32, ge=1)
    seed: int = 0
    val_fraction: float = Field(0.15, gt=0, lt=1)
    patience: Optional[int] = Field(None, ge=1)


class DistillConfig(_Section):
    """Temperature, loss weights and epochs of teacher-student training."""

    temperature: float = Field(4.0, gt=0)
    alpha: float = Field(0.7, ge=0)
    beta: float = Field(0.3, ge=0)
    epochs: int = Field(30, ge=1)
    training: TrainingConfig = Field(default_factory=TrainingConfig)

    @model_validator(mode="after")
    def _weights(self) -> "DistillConfig":
        if self.alpha + self.beta <= 0:
            raise ValueError("alpha + beta must be > 0")
        return self


class NetworkConfig(_Section):
    """Channel widths of the two CNN variants and the head layout."""

    teacher_widths: List[int] = [32, 32, 64, 64, 128, 128, 256, 256]
    student_widths: List[int] = [16, 16, 32, 32, 64, 64, 112, 256]
    large_teacher_widths: List[int] = [64, 128, 128, 256, 256, 448, 512, 256]
    head_hidden: int = Field(64, ge=1)
    head_dropout: float = Field(0.5, ge=0, lt=1)
    compact_head: bool = False
    compact_head_hidden: int = Field(36, ge=1)

    @field_validator("teacher_widths", "student_widths", "large_teacher_widths")
    @classmethod
    def _eight_layers(cls, widths: List[int]) -> List[int]:
        if len(widths) != 8 or any(w < 1 for w in widths):
            raise ValueError("exactly eight positive conv widths are required")
        return widths


class PruneConfig(_Section):
    neuron_fraction: float = Field(0.125, ge=0, lt=1)
    strategy: Literal["random", "magnitude"] = "random"
    layers: List[str] = ["conv2", "conv4", "conv6"]
    fine_tune_epochs: int = Field(2, ge=0)
    seed: int = 0


class QuantConfig(_Section):
    q_min: int = -128
    q_max: int = 127
    calibration_size: int = Field(64, ge=1)

    @model_validator(mode="after")
    def _range(self) -> "QuantConfig":
        if self.q_min >= self.q_max:
            raise ValueError("q_min must be < q_max")
        return self


class PipelineConfig(_Section):
    """Everything one pipeline run needs; mirrors hivesig.yaml."""

    dataset_root: Optional[Path] = None
    output_dir: Path = Path("runs")
    representation: Representation = "cochleagram"
    channels: Literal[1, 3] = 3
    seed: int = 0
    threads: Optional[int] = Field(None, ge=1)
    audio: AudioConfig = Field(default_factory=AudioConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    stft: StftConfig = Field(default_factory=StftConfig)
    mel: MelConfig = Field(default_factory=MelConfig)
    smoothing: SmoothingConfig = Field(default_factory=SmoothingConfig)
    gammatone: GammatoneConfig = Field(default_factory=GammatoneConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    distill: DistillConfig = Field(default_factory=DistillConfig)
    prune: PruneConfig = Field(default_factory=PruneConfig)
    quant: QuantConfig = Field(default_factory=QuantConfig)

    @model_validator(mode="after")
    def _propagate_seed(self) -> "PipelineConfig":
        # assign through __dict__ to avoid re-running validation recursively
        self.training.__dict__["seed"] = self.seed
        self.distill.training.__dict__["seed"] = self.seed
        self.prune.__dict__["seed"] = self.seed
        self.augment.__dict__["seed"] = self.seed
        return self

    def feature_settings(self) -> Dict[str, Any]:
        """The subset of the config that determines a TFImage."""
        return {
            "representation": self.representation,
            "channels": self.channels,
            "audio": self.audio.model_dump(),
            "stft": self.stft.model_dump(),
            "mel": self.mel.model_dump(),
            "smoothing": self.smoothing.model_dump(),
            "gammatone": self.gammatone.model_dump(),
        }


def _deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """Load a YAML config file and apply overrides.

    Args:
        path: YAML file. When None, the repository default is used if present.
        overrides: Nested dict applied on top of the file (CLI flags).

    Returns:
        Validated PipelineConfig.

    Raises:
        InputError: File unreadable or values fail validation.
    """
    raw: Dict[str, Any] = {}
    if path is None and DEFAULT_CONFIG_FILE.exists():
        path = DEFAULT_CONFIG_FILE
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                raw = yaml.safe_load(f) or {}
        except FileNotFoundError as exc:
            raise InputError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise InputError(f"config file {path} is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise InputError(f"config file {path} must hold a mapping at top level")

    if overrides:
        raw = _deep_merge(raw, overrides)

    try:
        return PipelineConfig.model_validate(raw)
    except ValidationError as exc:
        raise InputError(f"invalid configuration: {exc}") from exc
