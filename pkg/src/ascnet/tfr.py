"""Short-time Fourier analysis/synthesis and time-frequency masking.

The signal is zero-padded by ``W - hop`` samples at both ends so every
original sample is covered by a full set of overlapping frames; synthesis
is plain overlap-add divided by the window's constant overlap-add sum.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import BadWindow, EmptyInput, ShapeMismatch

COLA_TOL = 1e-8


def hann(width: int) -> np.ndarray:
    """Periodic Hann window (COLA at hop = width/2)."""
    n = np.arange(width)
    return 0.5 - 0.5 * np.cos(2 * np.pi * n / width)


def cola_sum(window: np.ndarray, hop: int) -> np.ndarray:
    """Sum of the window shifted by multiples of ``hop``, over one hop period."""
    w = np.asarray(window, dtype=np.float64)
    total = np.zeros(hop)
    for start in range(0, len(w), hop):
        chunk = w[start:start + hop]
        total[:len(chunk)] += chunk
    return total


def check_cola(window: np.ndarray, hop: int) -> float:
    """Return the overlap-add constant, raising ``BadWindow`` if there is none."""
    if hop < 1 or hop > len(window):
        raise BadWindow(f"hop must be in [1, {len(window)}], got {hop}")
    s = cola_sum(window, hop)
    c = float(np.mean(s))
    if abs(c) < COLA_TOL or np.max(np.abs(s - c)) > COLA_TOL * max(1.0, abs(c)):
        raise BadWindow(f"window is not constant-overlap-add at hop {hop}")
    return c


@dataclass
class Spectrogram:
    frames: np.ndarray  # complex (n_frames, W // 2 + 1)
    window: np.ndarray
    hop: int
    original_length: int

    def __post_init__(self):
        w = len(self.window)
        if self.frames.ndim != 2 or self.frames.shape[1] != w // 2 + 1:
            raise ShapeMismatch(f"frames must have {w // 2 + 1} bins, got {self.frames.shape}")
        check_cola(self.window, self.hop)

    @property
    def shape(self):
        return self.frames.shape


def stft(x, window: np.ndarray | None = None, hop: int = 128) -> Spectrogram:
    x = np.asarray(x, dtype=np.float64)
    window = hann(256) if window is None else np.asarray(window, dtype=np.float64)
    if x.size == 0:
        raise EmptyInput("cannot transform an empty signal")
    check_cola(window, hop)
    w = len(window)
    pad = w - hop
    n_frames = -(-(len(x) + pad) // hop)  # frames needed to cover x plus the tail pad
    total = (n_frames - 1) * hop + w
    padded = np.zeros(total)
    padded[pad:pad + len(x)] = x
    idx = np.arange(w)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = np.fft.rfft(padded[idx] * window, axis=1)
    return Spectrogram(frames, window.copy(), hop, len(x))


def istft(spec: Spectrogram) -> np.ndarray:
    c = check_cola(spec.window, spec.hop)
    w = len(spec.window)
    n_frames = spec.frames.shape[0]
    out = np.zeros((n_frames - 1) * spec.hop + w)
    chunks = np.fft.irfft(spec.frames, n=w, axis=1)
    for k in range(n_frames):
        out[k * spec.hop:k * spec.hop + w] += chunks[k]
    pad = w - spec.hop
    return out[pad:pad + spec.original_length] / c


def apply_mask(spec: Spectrogram, mask) -> Spectrogram:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != spec.frames.shape:
        raise ShapeMismatch(f"mask shape {mask.shape} != spectrogram shape {spec.frames.shape}")
    if not np.all(np.isfinite(mask)) or np.any(mask < 0):
        raise ValueError("mask values must be finite and non-negative")
    return Spectrogram(spec.frames * mask, spec.window, spec.hop, spec.original_length)


def lowpass_mask(spec: Spectrogram, cutoff_bin: int) -> np.ndarray:
    """Binary mask keeping bins strictly below ``cutoff_bin``."""
    mask = np.zeros(spec.frames.shape)
    mask[:, :cutoff_bin] = 1.0
    return mask


def dump_csv(spec: Spectrogram, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame", "bin", "re", "im"])
        for k, row in enumerate(spec.frames):
            for b, z in enumerate(row):
                wr.writerow([k, b, repr(float(z.real)), repr(float(z.imag))])
