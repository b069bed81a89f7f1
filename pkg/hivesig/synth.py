"""
Synthetic hive-state dataset

This module:
1. Synthesizes band-limited tone mixtures plus noise, one fundamental per class
2. Writes them as 16-bit WAV files in the one-directory-per-class layout

All four fundamentals sit below 1 kHz, where most colony sound lives.
"""

import logging
from pathlib import Path
from typing import Dict, List

import numpy as np

from .audio_io import AudioClip, write_wav

logger = logging.getLogger(__name__)

CLASS_NAMES = [
    "queen_not_present",
    "queen_present_newly_accepted",
    "queen_present_rejected",
    "queen_present_original",
]
FUNDAMENTALS_HZ = [180.0, 260.0, 370.0, 520.0]
HARMONIC_GAINS = [1.0, 0.5, 0.25]

SAMPLE_RATE = 22050
CLIP_SECONDS = 2.0
PITCH_JITTER = 0.03
NOISE_LEVEL = 0.05
PEAK = 0.8


def synth_clip(
    label: int,
    rng: np.random.Generator,
    seconds: float = CLIP_SECONDS,
    sample_rate: int = SAMPLE_RATE,
) -> AudioClip:
    """One clip of class `label`: jittered harmonic stack, slow AM, white noise."""
    n = int(round(seconds * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = FUNDAMENTALS_HZ[label] * (1.0 + rng.uniform(-PITCH_JITTER, PITCH_JITTER))
    y = np.zeros(n)
    for k, gain in enumerate(HARMONIC_GAINS, start=1):
        y += gain * np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi))
    am_rate = rng.uniform(2.0, 6.0)
    y *= 1.0 + 0.3 * np.sin(2 * np.pi * am_rate * t)
    y /= np.max(np.abs(y))
    y += NOISE_LEVEL * rng.standard_normal(n)
    y *= PEAK / np.max(np.abs(y))
    return AudioClip(samples=y, sample_rate=sample_rate, label=label)


def generate_dataset(
    root: Path,
    clips_per_class: int = 200,
    seconds: float = CLIP_SECONDS,
    sample_rate: int = SAMPLE_RATE,
    seed: int = 0,
) -> Dict[str, List[Path]]:
    """Write `clips_per_class` WAVs for each class under `root/<class>/`.

    Each clip is seeded from (seed, class, index), so any subset regenerates
    identically.

    Returns:
        Class name -> written paths
    """
    root = Path(root)
    written: Dict[str, List[Path]] = {}
    for label, name in enumerate(CLASS_NAMES):
        paths = []
        for i in range(clips_per_class):
            rng = np.random.default_rng([seed, label, i])
            clip = synth_clip(label, rng, seconds, sample_rate)
            path = root / name / f"{name}_{i:04d}.wav"
            write_wav(clip, path, subtype="PCM_16")
            paths.append(path)
        written[name] = paths
        logger.info("Wrote %d clips for %s", len(paths), name)
    return written
