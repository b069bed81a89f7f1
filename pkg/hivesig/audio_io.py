"""
Audio ingestion

This module:
1. Decodes PCM/float WAV files into mono clips in [-1, 1]
2. Resamples with a polyphase windowed-sinc filter
3. Cuts clips into fixed-length, non-overlapping segments
4. Applies pitch-shift / time-stretch / speed-change augmentation
5. Discovers class-per-directory datasets and audio manifests
"""

import csv
import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from math import gcd
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import librosa
import numpy as np
import soundfile as sf
from scipy.signal import resample_poly

from .config import AugmentConfig
from .errors import (
    EmptyAudio,
    InvalidFactor,
    InvalidRate,
    IoFailure,
    MalformedHeader,
    UnsupportedEncoding,
)

logger = logging.getLogger(__name__)

SUPPORTED_FORMATS = {"WAV", "WAVEX"}
SUPPORTED_SUBTYPES = {"PCM_U8", "PCM_16", "PCM_24", "FLOAT"}
AUGMENT_KINDS = ("pitch_shift", "time_stretch", "speed_change")

# Kaiser beta for the anti-aliasing filter; ~100 dB stopband
_RESAMPLE_WINDOW = ("kaiser", 10.0)


@dataclass
class AudioClip:
    """Mono sample buffer with its rate and provenance."""

    samples: np.ndarray
    sample_rate: int
    label: Optional[int] = None
    source_id: str = ""

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InvalidRate(f"sample rate must be positive, got {self.sample_rate}")
        self.samples = np.asarray(self.samples, dtype=np.float64)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class AugmentSpec:
    """One augmentation: kind, its magnitude, and the seed that drew it."""

    kind: str
    value: float
    seed: int = 0
    max_semitones: float = 12.0

    def __post_init__(self):
        if self.kind not in AUGMENT_KINDS:
            raise InvalidFactor(f"unknown augmentation kind: {self.kind}")
        if not np.isfinite(self.value):
            raise InvalidFactor(f"{self.kind} magnitude must be finite")
        if self.kind == "pitch_shift":
            if abs(self.value) > self.max_semitones:
                raise InvalidFactor(
                    f"pitch shift of {self.value} semitones exceeds ±{self.max_semitones}"
                )
        elif self.value <= 0:
            raise InvalidFactor(f"{self.kind} factor must be > 0, got {self.value}")

    @classmethod
    def draw(cls, cfg: AugmentConfig, seed: int) -> "AugmentSpec":
        """The augmentation `seed` selects from the configured kinds and values."""
        choices = _augment_choices(cfg)
        if not choices:
            raise InvalidFactor("no augmentation values configured")
        rng = np.random.default_rng(seed)
        kinds = [k for k in AUGMENT_KINDS if k in choices]
        kind = kinds[int(rng.integers(len(kinds)))]
        values = choices[kind]
        value = float(values[int(rng.integers(len(values)))])
        return cls(kind=kind, value=value, seed=int(seed), max_semitones=cfg.max_semitones)


def _finalize(samples: np.ndarray) -> np.ndarray:
    """Clamp-and-renormalize pass shared by every producer of samples."""
    samples = np.nan_to_num(np.asarray(samples, dtype=np.float64))
    peak = float(np.max(np.abs(samples))) if samples.size else 0.0
    if peak > 1.0:
        samples = samples / peak
    return np.clip(samples, -1.0, 1.0)


def load_wav(path: Path) -> AudioClip:
    """Decode a WAV file into a mono clip.

    Args:
        path: WAV file (8/16/24-bit PCM or 32-bit float, mono or stereo)

    Returns:
        AudioClip with samples in [-1, 1]; stereo is mean-downmixed.

    Raises:
        IoFailure: File does not exist.
        MalformedHeader: libsndfile cannot parse the header.
        UnsupportedEncoding: Not a WAV, unsupported sample format or channel count.
        EmptyAudio: Header parses but holds zero frames.
    """
    path = Path(path)
    if not path.is_file():
        raise IoFailure(f"audio file not found: {path}")

    try:
        info = sf.info(str(path))
    except (sf.SoundFileError, RuntimeError) as exc:
        raise MalformedHeader(f"{path}: {exc}") from exc

    if info.format not in SUPPORTED_FORMATS or info.subtype not in SUPPORTED_SUBTYPES:
        raise UnsupportedEncoding(f"{path}: {info.format}/{info.subtype} is not supported")
    if info.channels not in (1, 2):
        raise UnsupportedEncoding(f"{path}: {info.channels} channels (expected 1 or 2)")
    if info.frames == 0:
        raise EmptyAudio(f"{path}: no audio frames")

    try:
        data, rate = sf.read(str(path), dtype="float64", always_2d=True)
    except (sf.SoundFileError, RuntimeError) as exc:
        raise MalformedHeader(f"{path}: {exc}") from exc
    if data.shape[0] == 0:
        raise EmptyAudio(f"{path}: no audio frames")

    mono = data.mean(axis=1)
    logger.debug("Loaded %s: %d frames, %d Hz, %d ch", path.name, len(mono), rate, info.channels)
    return AudioClip(samples=_finalize(mono), sample_rate=int(rate), source_id=str(path))


def write_wav(clip: AudioClip, path: Path, subtype: str = "PCM_16") -> None:
    """Write a clip as a mono WAV file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), clip.samples, clip.sample_rate, subtype=subtype, format="WAV")


def _resample_array(samples: np.ndarray, up: int, down: int, out_len: int) -> np.ndarray:
    if up == down:
        return librosa.util.fix_length(samples.copy(), size=out_len)
    g = gcd(up, down)
    out = resample_poly(samples, up // g, down // g, window=_RESAMPLE_WINDOW, padtype="line")
    return librosa.util.fix_length(out, size=out_len)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Band-limited rate conversion.

    Output length is round(len * target / source).
    """
    if target_rate <= 0:
        raise InvalidRate(f"target rate must be positive, got {target_rate}")
    target_rate = int(target_rate)
    if target_rate == clip.sample_rate:
        return replace(clip, samples=clip.samples.copy())

    out_len = int(round(len(clip.samples) * target_rate / clip.sample_rate))
    out = _resample_array(clip.samples, target_rate, clip.sample_rate, out_len)
    return replace(clip, samples=_finalize(out), sample_rate=target_rate)


def segment(clip: AudioClip, seconds: float) -> List[AudioClip]:
    """Split a clip into contiguous windows of `seconds`, dropping the partial tail."""
    if seconds <= 0:
        raise InvalidFactor(f"segment length must be > 0 seconds, got {seconds}")
    n = int(round(seconds * clip.sample_rate))
    count = len(clip.samples) // n if n > 0 else 0
    segments = []
    for i in range(count):
        segments.append(
            replace(
                clip,
                samples=clip.samples[i * n:(i + 1) * n].copy(),
                source_id=f"{clip.source_id}#seg{i:03d}",
            )
        )
    dropped = len(clip.samples) - count * n
    if dropped:
        logger.debug("%s: dropped %d trailing samples", clip.source_id, dropped)
    return segments


def augment(clip: AudioClip, spec: AugmentSpec) -> AudioClip:
    """Apply one augmentation.

    pitch_shift keeps duration; time_stretch keeps pitch and multiplies
    duration by the factor; speed_change divides duration by the factor and
    scales every frequency by it (no rate relabel).
    """
    y = clip.samples
    if spec.kind == "pitch_shift":
        if spec.value == 0:
            return replace(clip, samples=y.copy())
        out = librosa.effects.pitch_shift(y, sr=clip.sample_rate, n_steps=float(spec.value))
    elif spec.kind == "time_stretch":
        if spec.value == 1.0:
            return replace(clip, samples=y.copy())
        out = librosa.effects.time_stretch(y, rate=1.0 / float(spec.value))
    else:
        if spec.value == 1.0:
            return replace(clip, samples=y.copy())
        ratio = Fraction(float(spec.value)).limit_denominator(1000)
        out_len = int(round(len(y) / float(spec.value)))
        # factor = a/b: up by b, down by a
        out = _resample_array(y, ratio.denominator, ratio.numerator, out_len)

    if len(out) == 0:
        raise InvalidFactor(f"{spec.kind}({spec.value}) leaves no samples")
    return replace(
        clip,
        samples=_finalize(out),
        source_id=f"{clip.source_id}+{spec.kind}({spec.value:g})",
    )


def _augment_choices(cfg: AugmentConfig) -> Dict[str, List[float]]:
    choices = {
        "pitch_shift": cfg.pitch_semitones,
        "time_stretch": cfg.stretch_factors,
        "speed_change": cfg.speed_factors,
    }
    return {k: list(v) for k, v in choices.items() if v}


def draw_augmentations(cfg: AugmentConfig, seed: int) -> List[AugmentSpec]:
    """Draw `cfg.copies_per_clip` augmentation specs deterministically from `seed`.

    Each spec is drawn from its own seed, so `AugmentSpec.draw(cfg, spec.seed)`
    reproduces it.
    """
    if not _augment_choices(cfg):
        return []
    rng = np.random.default_rng(seed)
    return [AugmentSpec.draw(cfg, int(rng.integers(2**31))) for _ in range(cfg.copies_per_clip)]


@dataclass
class AudioDataset:
    """Audio files grouped by class; class index = position in `class_names`."""

    class_names: List[str]
    files: Dict[str, List[Path]] = field(default_factory=dict)

    def items(self) -> List[Tuple[Path, int]]:
        out = []
        for idx, name in enumerate(self.class_names):
            out.extend((p, idx) for p in self.files.get(name, []))
        return out


def discover_dataset(root: Path) -> AudioDataset:
    """Scan one-directory-per-class layout. Class order is sorted directory name.

    Raises:
        IoFailure: Root missing or holding no class directories.
    """
    root = Path(root)
    if not root.is_dir():
        raise IoFailure(f"dataset root is not a directory: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not class_dirs:
        raise IoFailure(f"no class directories under {root}")
    files = {
        d.name: sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() == ".wav")
        for d in class_dirs
    }
    return AudioDataset(class_names=[d.name for d in class_dirs], files=files)


def read_audio_manifest(path: Path) -> AudioDataset:
    """Read a manifest CSV with columns `path,label` into an AudioDataset.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            rows = list(csv.DictReader(f))
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    if rows and not {"path", "label"} <= set(rows[0].keys()):
        raise IoFailure(f"manifest {path} needs columns path,label")

    files: Dict[str, List[Path]] = {}
    for row in rows:
        p = Path(row["path"])
        if not p.is_absolute():
            p = path.parent / p
        files.setdefault(row["label"], []).append(p)
    names = sorted(files)
    return AudioDataset(class_names=names, files={n: sorted(files[n]) for n in names})
