"""
Time-frequency representations

This module:
1. Computes the STFT and the log spectrogram
2. Applies a mel filterbank to the power spectrogram
3. Smooths the log spectrogram with moving averages along time and frequency
4. Builds a gammatone cochleagram with ERB-spaced channels
5. Rasterizes any of the above to a fixed 64x64 image
6. Reads/writes the TFR1 matrix format and PNG previews
"""

import logging
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")

import librosa  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib import colormaps  # noqa: E402
from matplotlib import image as mpimg  # noqa: E402
from numpy.lib.stride_tricks import sliding_window_view  # noqa: E402
from scipy.ndimage import uniform_filter1d, zoom  # noqa: E402
from scipy.signal import fftconvolve, get_window  # noqa: E402

from .audio_io import AudioClip, resample  # noqa: E402
from .config import (  # noqa: E402
    GammatoneConfig,
    MelConfig,
    PipelineConfig,
    SmoothingConfig,
    StftConfig,
)
from .errors import (  # noqa: E402
    EmptyMatrix,
    InvalidBand,
    IoFailure,
    ShapeMismatch,
    TooShort,
    VersionMismatch,
)

logger = logging.getLogger(__name__)

RASTER_SIZE = 64
RASTER_COLORMAP = "viridis"

TFR_MAGIC = b"TFR1"
_TFR_HEADER = struct.Struct("<IIB")


class TFKind(str, Enum):
    SPECTROGRAM = "spectrogram"
    MEL = "mel"
    SMOOTHED = "smoothed"
    COCHLEAGRAM = "cochleagram"


# u8 kind code in TFR1 files
KIND_CODES = {
    TFKind.SPECTROGRAM: 0,
    TFKind.MEL: 1,
    TFKind.SMOOTHED: 2,
    TFKind.COCHLEAGRAM: 3,
}
_CODE_KINDS = {v: k for k, v in KIND_CODES.items()}


@dataclass
class TFImage:
    """Bins x frames matrix plus its kind. Row 0 is the lowest frequency."""

    matrix: np.ndarray
    kind: TFKind

    def __post_init__(self):
        self.kind = TFKind(self.kind)
        if self.matrix.ndim != 2:
            raise ShapeMismatch(f"TF matrix must be 2-D, got shape {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise ShapeMismatch("TF matrix contains non-finite values")

    @property
    def shape(self):
        return self.matrix.shape

    def raster(self, channels: int = 3, size: int = RASTER_SIZE) -> np.ndarray:
        return rasterize(self.matrix, size=size, channels=channels)


@dataclass
class MelBank:
    """Triangular mel filters, n_mels x (n_fft/2 + 1)."""

    weights: np.ndarray
    f_min: float
    f_max: float

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]


# ---------------------------------------------------------------------------
# STFT family
# ---------------------------------------------------------------------------

def _window(cfg: StftConfig) -> np.ndarray:
    if cfg.window == "rectangular":
        return np.ones(cfg.n_fft)
    return get_window("hann", cfg.n_fft, fftbins=True)


def frame_count(length: int, n_fft: int, hop: int) -> int:
    """Number of full frames: 1 + floor((length - n_fft) / hop)."""
    if length < n_fft:
        raise TooShort(f"signal of {length} samples is shorter than one frame ({n_fft})")
    return 1 + (length - n_fft) // hop


def stft(clip: AudioClip, cfg: StftConfig) -> np.ndarray:
    """Complex STFT, shape (n_fft/2 + 1, frames)."""
    x = np.asarray(clip.samples, dtype=np.float64)
    n_frames = frame_count(len(x), cfg.n_fft, cfg.hop)
    frames = sliding_window_view(x, cfg.n_fft)[:: cfg.hop][:n_frames]
    spectrum = np.fft.rfft(frames * _window(cfg), axis=-1)
    return spectrum.T


def _log(power: np.ndarray, floor: float) -> np.ndarray:
    return np.log(np.maximum(power, floor))


def spectrogram(clip: AudioClip, cfg: StftConfig) -> TFImage:
    """S(k, r) = log(max(|X(k, r)|^2, eps))."""
    power = np.abs(stft(clip, cfg)) ** 2
    return TFImage(matrix=_log(power, cfg.log_floor), kind=TFKind.SPECTROGRAM)


def mel_bank(sample_rate: int, n_fft: int, cfg: Optional[MelConfig] = None) -> MelBank:
    """Slaney-style mel filterbank from librosa."""
    cfg = cfg or MelConfig()
    f_max = cfg.f_max if cfg.f_max is not None else sample_rate / 2.0
    if not 0 <= cfg.f_min < f_max <= sample_rate / 2.0:
        raise InvalidBand(f"mel band [{cfg.f_min}, {f_max}] Hz invalid at {sample_rate} Hz")
    weights = librosa.filters.mel(
        sr=sample_rate,
        n_fft=n_fft,
        n_mels=cfg.n_mels,
        fmin=cfg.f_min,
        fmax=f_max,
        htk=False,
        norm="slaney",
    )
    return MelBank(weights=weights.astype(np.float64), f_min=cfg.f_min, f_max=f_max)


def mel_from_power(power: np.ndarray, bank: MelBank, floor: float) -> np.ndarray:
    if bank.weights.shape[1] != power.shape[0]:
        raise ShapeMismatch(
            f"mel bank expects {bank.weights.shape[1]} bins, spectrogram has {power.shape[0]}"
        )
    return _log(bank.weights @ power, floor)


def mel_spectrogram(clip: AudioClip, cfg: StftConfig, bank: MelBank) -> TFImage:
    """Log of the mel-weighted power spectrogram."""
    if bank.weights.shape[1] != cfg.n_fft // 2 + 1:
        raise ShapeMismatch(
            f"mel bank built for {bank.weights.shape[1]} bins, n_fft={cfg.n_fft} "
            f"gives {cfg.n_fft // 2 + 1}"
        )
    power = np.abs(stft(clip, cfg)) ** 2
    return TFImage(matrix=mel_from_power(power, bank, cfg.log_floor), kind=TFKind.MEL)


def _moving_average(matrix: np.ndarray, size: int, axis: int) -> np.ndarray:
    if size == 1:
        return matrix
    total = uniform_filter1d(matrix, size=size, axis=axis, mode="constant", cval=0.0)
    count = uniform_filter1d(np.ones_like(matrix), size=size, axis=axis, mode="constant", cval=0.0)
    return total / count


def smooth_matrix(matrix: np.ndarray, smooth: SmoothingConfig) -> np.ndarray:
    """Moving average over `time_window` frames, then `freq_window` bins.

    Borders average over the neighbours that exist.
    """
    bins, frames = matrix.shape
    if smooth.time_window > frames or smooth.freq_window > bins:
        raise TooShort(
            f"smoothing window {smooth.freq_window}x{smooth.time_window} exceeds "
            f"matrix {bins}x{frames}"
        )
    out = _moving_average(np.asarray(matrix, dtype=np.float64), smooth.time_window, axis=1)
    return _moving_average(out, smooth.freq_window, axis=0)


def smoothed_spectrogram(clip: AudioClip, cfg: StftConfig, smooth: SmoothingConfig) -> TFImage:
    base = spectrogram(clip, cfg)
    return TFImage(matrix=smooth_matrix(base.matrix, smooth), kind=TFKind.SMOOTHED)


# ---------------------------------------------------------------------------
# Gammatone cochleagram
# ---------------------------------------------------------------------------

def erb_hz(f):
    """Equivalent rectangular bandwidth (Hz) at frequency f."""
    return 24.7 * (4.37 * np.asarray(f, dtype=np.float64) / 1000.0 + 1.0)


def erb_scale(f):
    return 21.4 * np.log10(1.0 + 0.00437 * np.asarray(f, dtype=np.float64))


def inv_erb_scale(e):
    return (10.0 ** (np.asarray(e, dtype=np.float64) / 21.4) - 1.0) / 0.00437


def erb_centers(f_min: float, f_max: float, n: int) -> np.ndarray:
    """`n` center frequencies from f_min to f_max, equally spaced on the ERB axis."""
    if n == 1:
        return np.array([float(f_min)])
    return inv_erb_scale(np.linspace(erb_scale(f_min), erb_scale(f_max), n))


def gammatone_impulse(fc: float, sample_rate: int, cfg: GammatoneConfig) -> np.ndarray:
    """FIR-truncated impulse response A t^(j-1) exp(-2 pi B t) cos(2 pi fc t + phi).

    With `cfg.amplitude` unset, A is chosen for unit peak magnitude response.
    """
    n = max(int(round(cfg.ir_duration * sample_rate)), 1)
    t = np.arange(n) / sample_rate
    bandwidth = cfg.bandwidth_scale * erb_hz(fc)
    h = t ** (cfg.order - 1) * np.exp(-2.0 * np.pi * bandwidth * t) * np.cos(
        2.0 * np.pi * fc * t + cfg.phase
    )
    if cfg.amplitude is not None:
        return cfg.amplitude * h
    n_fft = 1 << int(np.ceil(np.log2(8 * n)))
    peak = float(np.max(np.abs(np.fft.rfft(h, n_fft))))
    return h / peak if peak > 0 else h


def cochleagram(clip: AudioClip, cfg: GammatoneConfig) -> TFImage:
    """Log windowed-energy of a gammatone filterbank; rows run low to high frequency."""
    sr = clip.sample_rate
    nyquist = sr / 2.0
    if not 0 < cfg.f_min < nyquist:
        raise InvalidBand(f"f_min {cfg.f_min} Hz must lie in (0, {nyquist}) Hz")

    win = max(int(round(cfg.win_time * sr)), 1)
    hop = max(int(round(cfg.hop_time * sr)), 1)
    x = np.asarray(clip.samples, dtype=np.float64)
    n_frames = frame_count(len(x), win, hop)

    centers = erb_centers(cfg.f_min, nyquist, cfg.n_channels)
    rows = np.empty((cfg.n_channels, n_frames))
    for c, fc in enumerate(centers):
        y = fftconvolve(x, gammatone_impulse(fc, sr, cfg))[: len(x)]
        frames = sliding_window_view(y * y, win)[::hop][:n_frames]
        rows[c] = frames.mean(axis=-1)
    logger.debug("Cochleagram %d channels x %d frames at %d Hz", cfg.n_channels, n_frames, sr)
    return TFImage(matrix=_log(rows, cfg.log_floor), kind=TFKind.COCHLEAGRAM)


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------

def rasterize(matrix: np.ndarray, size: int = RASTER_SIZE, channels: int = 3) -> np.ndarray:
    """Bilinear resize to size x size, per-image min-max to [0, 1].

    Returns:
        float32 array of shape (size, size, channels). Three channels go
        through a fixed colormap; one channel keeps the normalized plane.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.size == 0 or matrix.ndim != 2:
        raise EmptyMatrix(f"cannot rasterize matrix of shape {matrix.shape}")
    if channels not in (1, 3):
        raise ShapeMismatch(f"channels must be 1 or 3, got {channels}")

    if matrix.shape != (size, size):
        plane = zoom(matrix, (size / matrix.shape[0], size / matrix.shape[1]), order=1)
        plane = plane[:size, :size]
    else:
        plane = matrix.copy()

    lo, hi = float(plane.min()), float(plane.max())
    if hi > lo:
        plane = (plane - lo) / (hi - lo)
    else:
        plane = np.zeros_like(plane)
    plane = np.clip(plane, 0.0, 1.0)

    if channels == 1:
        return plane[..., None].astype(np.float32)
    return colormaps[RASTER_COLORMAP](plane)[..., :3].astype(np.float32)


def represent(clip: AudioClip, cfg: PipelineConfig) -> TFImage:
    """Compute the configured representation of an already-resampled clip."""
    kind = TFKind(cfg.representation)
    if kind is TFKind.SPECTROGRAM:
        return spectrogram(clip, cfg.stft)
    if kind is TFKind.MEL:
        return mel_spectrogram(clip, cfg.stft, mel_bank(clip.sample_rate, cfg.stft.n_fft, cfg.mel))
    if kind is TFKind.SMOOTHED:
        return smoothed_spectrogram(clip, cfg.stft, cfg.smoothing)
    return cochleagram(clip, cfg.gammatone)


def featurize_clip(clip: AudioClip, cfg: PipelineConfig) -> TFImage:
    """Resample to the configured rate, then compute the representation."""
    if clip.sample_rate != cfg.audio.target_rate:
        clip = resample(clip, cfg.audio.target_rate)
    return represent(clip, cfg)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def write_tfr(image: TFImage, path: Path) -> None:
    """TFR1: magic, u32 rows, u32 cols, u8 kind, row-major little-endian f32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows, cols = image.matrix.shape
    payload = np.ascontiguousarray(image.matrix, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(TFR_MAGIC)
        f.write(_TFR_HEADER.pack(rows, cols, KIND_CODES[image.kind]))
        f.write(payload)


def read_tfr(path: Path) -> TFImage:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if blob[:4] != TFR_MAGIC:
        raise VersionMismatch(f"{path}: not a TFR1 file")
    head_end = 4 + _TFR_HEADER.size
    if len(blob) < head_end:
        raise IoFailure(f"{path}: truncated header")
    rows, cols, code = _TFR_HEADER.unpack(blob[4:head_end])
    if code not in _CODE_KINDS:
        raise VersionMismatch(f"{path}: unknown representation code {code}")
    expected = rows * cols * 4
    if len(blob) - head_end != expected:
        raise IoFailure(f"{path}: payload is {len(blob) - head_end} bytes, expected {expected}")
    matrix = np.frombuffer(blob, dtype="<f4", offset=head_end).reshape(rows, cols)
    return TFImage(matrix=matrix.astype(np.float64), kind=_CODE_KINDS[code])


def save_png(raster: np.ndarray, path: Path) -> None:
    """8-bit PNG preview of a raster (row 0 = lowest frequency drawn at the bottom)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image = np.flipud(raster)
    if image.shape[-1] == 1:
        mpimg.imsave(str(path), image[..., 0], cmap="gray", vmin=0.0, vmax=1.0)
    else:
        mpimg.imsave(str(path), np.clip(image, 0.0, 1.0))
