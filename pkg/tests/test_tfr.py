import numpy as np
import pytest

from ascnet.errors import BadWindow, EmptyInput, ShapeMismatch
from ascnet.tfr import Spectrogram, apply_mask, check_cola, dump_csv, hann, istft, lowpass_mask, stft


def direct_dft(x):
    n = len(x)
    k = np.arange(n // 2 + 1)[:, None]
    return (x[None, :] * np.exp(-2j * np.pi * k * np.arange(n)[None, :] / n)).sum(axis=1)


def test_zero_input_gives_zero_frames():
    spec = stft(np.zeros(1000))
    assert not np.any(spec.frames)
    assert spec.shape[1] == 129
    np.testing.assert_array_equal(istft(spec), np.zeros(1000))


def test_cosine_single_bin_against_direct_dft():
    w, k0 = 64, 5
    x = np.cos(2 * np.pi * k0 * np.arange(8 * w) / w)
    spec = stft(x, window=np.ones(w), hop=w)
    for frame in spec.frames[1:-1]:  # interior frames see a full period set
        mag = np.abs(frame)
        assert np.argmax(mag) == k0
        assert np.all(np.delete(mag, k0) < 1e-9 * mag[k0])
    # frame k covers padded[k*hop : k*hop+W]; pad is zero for hop == W
    np.testing.assert_allclose(spec.frames[2], direct_dft(x[2 * w:3 * w]), atol=1e-9)


def test_parseval_per_frame(rng):
    x = rng.standard_normal(900)
    spec = stft(x)
    w, hop = 256, 128
    padded = np.concatenate([np.zeros(w - hop), x, np.zeros(spec.shape[0] * hop)])
    for k, frame in enumerate(spec.frames):
        xw = padded[k * hop:k * hop + w] * spec.window
        full = np.concatenate([frame, np.conj(frame[-2:0:-1])])
        assert np.sum(xw**2) == pytest.approx(np.sum(np.abs(full) ** 2) / w, rel=1e-10, abs=1e-12)


def test_round_trip_100_signals(rng):
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal(int(rng.integers(1, 5000)))
        y = istft(stft(x))
        worst = max(worst, np.linalg.norm(y - x) / np.linalg.norm(x))
    assert worst < 1e-6


def test_linearity(rng):
    x, y = rng.standard_normal(700), rng.standard_normal(700)
    lhs = stft(2.5 * x - 0.75 * y).frames
    rhs = 2.5 * stft(x).frames - 0.75 * stft(y).frames
    assert np.max(np.abs(lhs - rhs)) < 1e-9


def test_masks(rng):
    spec = stft(rng.standard_normal(600))
    same = apply_mask(spec, np.ones(spec.shape))
    np.testing.assert_array_equal(same.frames, spec.frames)
    assert not np.any(apply_mask(spec, np.zeros(spec.shape)).frames)
    with pytest.raises(ShapeMismatch):
        apply_mask(spec, np.ones((1, 1)))
    with pytest.raises(ValueError):
        apply_mask(spec, -np.ones(spec.shape))


def test_lowpass_keeps_band_limited_energy(rng):
    n, w = 4096, 256
    t = np.arange(n)
    x = sum(rng.uniform(0.2, 1) * np.cos(2 * np.pi * rng.uniform(1, 40) * t / w + rng.uniform(0, 6))
            for _ in range(6))
    spec = stft(x)
    cutoff = w // 4  # half of Nyquist
    y = istft(apply_mask(spec, lowpass_mask(spec, cutoff)))
    Y = np.fft.rfft(y)
    freqs = np.fft.rfftfreq(n)
    below = np.sum(np.abs(Y[freqs < cutoff / w]) ** 2)
    assert below / np.sum(np.abs(Y) ** 2) >= 0.99
    assert np.linalg.norm(y - x) / np.linalg.norm(x) < 0.05


def test_errors():
    with pytest.raises(EmptyInput):
        stft([])
    with pytest.raises(BadWindow):
        stft(np.ones(10), window=np.hanning(256), hop=128)  # symmetric Hann is not COLA
    with pytest.raises(BadWindow):
        check_cola(hann(16), 32)
    assert check_cola(hann(256), 128) == pytest.approx(1.0)


def test_truncation_to_original_length(rng):
    x = rng.standard_normal(300)
    spec = stft(x)
    short = Spectrogram(spec.frames, spec.window, spec.hop, 100)
    np.testing.assert_allclose(istft(short), x[:100], atol=1e-12)


def test_dump_csv(tmp_path):
    spec = stft(np.ones(10), window=np.ones(4), hop=4)
    dump_csv(spec, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "frame,bin,re,im"
    assert len(lines) == 1 + spec.shape[0] * spec.shape[1]
