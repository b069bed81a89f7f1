"""
Shared pytest fixtures: WAV writers, a tiny CNN spec and a separable toy dataset.
"""

from pathlib import Path

import numpy as np
import pytest
import soundfile as sf

from hivesig.network import LayerSpec, NetworkSpec, build_head
from hivesig.training import Dataset


@pytest.fixture
def write_wav_file(tmp_path):
    """Factory: write samples (mono 1-D or stereo N x 2) to a WAV and return its path."""

    def _write(samples, sample_rate=16000, name="clip.wav", subtype="PCM_16"):
        path = Path(tmp_path) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        sf.write(str(path), np.asarray(samples), sample_rate, subtype=subtype, format="WAV")
        return path

    return _write


def sine(freq, seconds, sample_rate, amplitude=0.5):
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return amplitude * np.sin(2 * np.pi * freq * t)


@pytest.fixture
def tone():
    return sine


def build_tiny_spec(n_classes=4, channels=3, width1=4, width2=4, hidden=8):
    """conv(+bn) -> pool/4 -> conv -> pool/4 -> dropout/flatten/fc1(+bn)/dropout/fc2(+bn)."""
    layers = [
        LayerSpec(kind="conv", name="conv1", out_channels=width1, has_bn=True),
        LayerSpec(kind="relu", name="relu1"),
        LayerSpec(kind="maxpool", name="pool1", pool=4),
        LayerSpec(kind="conv", name="conv2", out_channels=width2),
        LayerSpec(kind="relu", name="relu2"),
        LayerSpec(kind="maxpool", name="pool2", pool=4),
    ] + build_head(hidden, 0.5, n_classes)
    return NetworkSpec(input_shape=(channels, 64, 64), layers=layers, n_classes=n_classes)


@pytest.fixture
def tiny_spec():
    return build_tiny_spec()


@pytest.fixture
def tiny_spec_factory():
    return build_tiny_spec


def make_toy_dataset(per_class=8, n_classes=4, seed=0):
    """Class c lights up horizontal band c of an otherwise noisy raster."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    band = 64 // n_classes
    for c in range(n_classes):
        for _ in range(per_class):
            x = 0.1 * rng.random((3, 64, 64))
            x[:, c * band:(c + 1) * band, :] += 0.8
            xs.append(x)
            ys.append(c)
    names = [f"class{c}" for c in range(n_classes)]
    return Dataset(np.stack(xs).astype(np.float32), np.array(ys), names, [f"s{i}" for i in range(len(ys))])


@pytest.fixture
def toy_dataset():
    return make_toy_dataset()


@pytest.fixture
def toy_dataset_factory():
    return make_toy_dataset
