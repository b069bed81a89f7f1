"""
Tests for the four time-frequency representations, rasterization and TFR1 files.
"""

import numpy as np
import pytest

from hivesig.audio_io import AudioClip
from hivesig.config import GammatoneConfig, MelConfig, PipelineConfig, SmoothingConfig, StftConfig
from hivesig.errors import EmptyMatrix, InvalidBand, IoFailure, ShapeMismatch, TooShort, VersionMismatch
from hivesig.tfrepr import (
    TFKind,
    cochleagram,
    erb_centers,
    frame_count,
    gammatone_impulse,
    mel_bank,
    mel_from_power,
    mel_spectrogram,
    rasterize,
    read_tfr,
    represent,
    smooth_matrix,
    smoothed_spectrogram,
    spectrogram,
    stft,
    write_tfr,
)

SR = 16000


def test_frame_count_matches_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n_fft = int(2 ** rng.integers(3, 11))
        hop = int(rng.integers(1, n_fft + 1))
        length = int(rng.integers(n_fft, 5 * n_fft))
        assert frame_count(length, n_fft, hop) == len(range(0, length - n_fft + 1, hop))


def test_frame_count_too_short():
    with pytest.raises(TooShort):
        frame_count(100, 1024, 512)


def test_bin_centered_sine_energy_in_one_bin():
    cfg = StftConfig(n_fft=1024, hop=512, window="rectangular")
    k0 = 32
    t = np.arange(SR) / SR
    clip = AudioClip(0.5 * np.cos(2 * np.pi * k0 * SR / cfg.n_fft * t), SR)
    power = np.abs(stft(clip, cfg)) ** 2
    share = power[k0] / power.sum(axis=0)
    assert np.all(share > 0.99)


def test_parseval_single_frame():
    cfg = StftConfig(n_fft=256, hop=256, window="rectangular")
    x = np.random.default_rng(1).uniform(-1, 1, 256)
    spec = stft(AudioClip(x, SR), cfg)[:, 0]
    mag = np.abs(spec) ** 2
    energy = (mag[0] + 2 * mag[1:-1].sum() + mag[-1]) / cfg.n_fft
    assert energy == pytest.approx(np.sum(x ** 2), rel=1e-9)


def test_stft_is_linear():
    cfg = StftConfig(n_fft=256, hop=128)
    rng = np.random.default_rng(4)
    x, y = rng.uniform(-0.5, 0.5, 2048), rng.uniform(-0.5, 0.5, 2048)
    a, b = 0.3, -0.7
    combined = stft(AudioClip(a * x + b * y, SR), cfg)
    separate = a * stft(AudioClip(x, SR), cfg) + b * stft(AudioClip(y, SR), cfg)
    np.testing.assert_allclose(combined, separate, atol=1e-10)


def test_tenfold_amplitude_adds_constant_to_log_spectrogram():
    cfg = StftConfig(n_fft=256, hop=128)
    x = np.random.default_rng(5).uniform(-0.05, 0.05, 4096)
    quiet = spectrogram(AudioClip(x, SR), cfg).matrix
    loud = spectrogram(AudioClip(10.0 * x, SR), cfg).matrix
    above = quiet > np.log(cfg.log_floor)
    assert above.mean() > 0.99
    np.testing.assert_allclose(loud[above] - quiet[above], 2.0 * np.log(10.0), atol=1e-9)


def test_spectrogram_shape_and_floor():
    cfg = StftConfig()
    image = spectrogram(AudioClip(np.zeros(SR), SR), cfg)
    assert image.kind is TFKind.SPECTROGRAM
    assert image.matrix.shape == (513, frame_count(SR, 1024, 512))
    np.testing.assert_allclose(image.matrix, np.log(cfg.log_floor))


def test_mel_bank_and_spectrogram(tone):
    bank = mel_bank(SR, 1024, MelConfig())
    assert bank.weights.shape == (64, 513)
    image = mel_spectrogram(AudioClip(tone(440.0, 1.0, SR), SR), StftConfig(), bank)
    assert image.kind is TFKind.MEL
    assert image.matrix.shape[0] == 64


def test_mel_spectrogram_matches_explicit_filter_sums():
    cfg = StftConfig()
    bank = mel_bank(SR, cfg.n_fft)
    x = np.random.default_rng(6).uniform(-0.5, 0.5, cfg.n_fft + 2 * cfg.hop)
    image = mel_spectrogram(AudioClip(x, SR), cfg, bank)
    power = np.abs(stft(AudioClip(x, SR), cfg)) ** 2
    n_mels, n_bins = bank.weights.shape
    assert image.matrix.shape == (n_mels, 3)
    for r in range(3):
        for m in range(n_mels):
            total = 0.0
            for k in range(n_bins):
                total += bank.weights[m, k] * power[k, r]
            assert image.matrix[m, r] == pytest.approx(np.log(max(total, cfg.log_floor)), rel=1e-9, abs=1e-9)


def test_impulse_at_filter_peak_selects_that_filter():
    bank = mel_bank(SR, 1024)
    for m in range(bank.n_mels):
        column = np.zeros((bank.weights.shape[1], 1))
        column[int(np.argmax(bank.weights[m])), 0] = 1.0
        response = mel_from_power(column, bank, 1e-10)[:, 0]
        assert int(np.argmax(response)) == m


def test_mel_band_validation():
    with pytest.raises(InvalidBand):
        mel_bank(SR, 1024, MelConfig(f_min=9000.0))


def test_mel_bank_must_match_fft_size(tone):
    bank = mel_bank(SR, 512)
    with pytest.raises(ShapeMismatch):
        mel_spectrogram(AudioClip(tone(440.0, 1.0, SR), SR), StftConfig(n_fft=1024), bank)


def test_smoothing_constant_and_impulse():
    cfg = SmoothingConfig(time_window=5, freq_window=5)
    np.testing.assert_allclose(smooth_matrix(np.full((20, 20), 3.0), cfg), 3.0)
    impulse = np.zeros((21, 21))
    impulse[10, 10] = 1.0
    out = smooth_matrix(impulse, cfg)
    assert out[10, 10] == pytest.approx(1.0 / 25.0)
    assert out.sum() == pytest.approx(1.0)


def test_three_frame_smoothing_of_impulse():
    impulse = np.zeros((21, 21))
    impulse[10, 10] = 1.0
    out = smooth_matrix(impulse, SmoothingConfig(time_window=3, freq_window=1))
    np.testing.assert_allclose(out[10, 9:12], 1.0 / 3.0, rtol=1e-12)
    rest = out.copy()
    rest[10, 9:12] = 0.0
    np.testing.assert_allclose(rest, 0.0, atol=1e-15)


def test_smoothing_stays_within_input_range():
    matrix = np.random.default_rng(7).normal(size=(30, 50))
    for t, f in [(3, 1), (1, 3), (5, 5), (7, 3)]:
        out = smooth_matrix(matrix, SmoothingConfig(time_window=t, freq_window=f))
        assert out.max() <= matrix.max() + 1e-12
        assert out.min() >= matrix.min() - 1e-12


def test_smoothing_preserves_mean_away_from_borders():
    matrix = np.zeros((40, 40))
    matrix[4:36, 4:36] = np.random.default_rng(8).normal(size=(32, 32))
    out = smooth_matrix(matrix, SmoothingConfig(time_window=5, freq_window=5))
    assert out.mean() == pytest.approx(matrix.mean(), abs=1e-9)


def test_smoothing_window_larger_than_matrix():
    with pytest.raises(TooShort):
        smooth_matrix(np.zeros((3, 30)), SmoothingConfig(freq_window=5))


def test_smoothed_spectrogram_kind(tone):
    image = smoothed_spectrogram(AudioClip(tone(300.0, 1.0, SR), SR), StftConfig(), SmoothingConfig())
    assert image.kind is TFKind.SMOOTHED


def test_gammatone_starts_at_zero_with_unit_peak():
    cfg = GammatoneConfig(order=4)
    h = gammatone_impulse(1000.0, SR, cfg)
    assert h[0] == 0.0
    response = np.abs(np.fft.rfft(h, 1 << 16))
    assert response.max() == pytest.approx(1.0, rel=1e-3)


def test_erb_centers_span_band():
    centers = erb_centers(20.0, 8000.0, 32)
    assert centers[0] == pytest.approx(20.0)
    assert centers[-1] == pytest.approx(8000.0)
    assert np.all(np.diff(centers) > 0)


@pytest.mark.parametrize("channel", [6, 12, 18, 24])
def test_cochleagram_peaks_at_tone_channel(tone, channel):
    cfg = GammatoneConfig()
    centers = erb_centers(cfg.f_min, SR / 2, cfg.n_channels)
    image = cochleagram(AudioClip(tone(float(centers[channel]), 1.0, SR), SR), cfg)
    assert image.kind is TFKind.COCHLEAGRAM
    assert image.matrix.shape[0] == cfg.n_channels
    assert int(np.argmax(image.matrix.mean(axis=1))) == channel


def test_cochleagram_rejects_band_above_nyquist(tone):
    with pytest.raises(InvalidBand):
        cochleagram(AudioClip(tone(100.0, 0.5, 1000), 1000), GammatoneConfig(f_min=600.0))


def test_rasterize_shapes_and_range():
    matrix = np.random.default_rng(2).normal(size=(32, 198))
    rgb = rasterize(matrix)
    gray = rasterize(matrix, channels=1)
    assert rgb.shape == (64, 64, 3) and rgb.dtype == np.float32
    assert gray.shape == (64, 64, 1)
    assert 0.0 <= rgb.min() and rgb.max() <= 1.0
    assert gray.min() == pytest.approx(0.0) and gray.max() == pytest.approx(1.0)


def test_rasterize_is_idempotent_on_gray():
    once = rasterize(np.random.default_rng(3).normal(size=(40, 90)), channels=1)[..., 0]
    twice = rasterize(once, channels=1)[..., 0]
    np.testing.assert_allclose(twice, once, atol=1e-6)


def test_rasterize_constant_and_empty():
    np.testing.assert_array_equal(rasterize(np.ones((10, 10)), channels=1), 0.0)
    with pytest.raises(EmptyMatrix):
        rasterize(np.zeros((0, 5)))


@pytest.mark.parametrize("kind", ["spectrogram", "mel", "smoothed", "cochleagram"])
def test_represent_dispatch(tone, kind):
    cfg = PipelineConfig(representation=kind)
    image = represent(AudioClip(tone(300.0, 1.0, SR), SR), cfg)
    assert image.kind is TFKind(kind)
    assert image.raster(3).shape == (64, 64, 3)


def test_tfr_file_round_trip(tmp_path, tone):
    image = spectrogram(AudioClip(tone(300.0, 0.5, SR), SR), StftConfig())
    path = tmp_path / "x.tfr"
    write_tfr(image, path)
    back = read_tfr(path)
    assert back.kind is TFKind.SPECTROGRAM
    np.testing.assert_array_equal(back.matrix, image.matrix.astype(np.float32))
    assert path.stat().st_size == 4 + 9 + image.matrix.size * 4


def test_tfr_bad_magic_and_truncation(tmp_path, tone):
    image = spectrogram(AudioClip(tone(300.0, 0.5, SR), SR), StftConfig())
    path = tmp_path / "x.tfr"
    write_tfr(image, path)
    blob = path.read_bytes()
    (tmp_path / "magic.tfr").write_bytes(b"XXXX" + blob[4:])
    (tmp_path / "short.tfr").write_bytes(blob[:-8])
    with pytest.raises(VersionMismatch):
        read_tfr(tmp_path / "magic.tfr")
    with pytest.raises(IoFailure):
        read_tfr(tmp_path / "short.tfr")
