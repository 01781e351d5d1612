"""Segmentation, normalization, calibrated noise injection and metrics.

Random draws use numpy's ``PCG64`` bit generator; Gaussian samples come from
``Generator.standard_normal`` (ziggurat). Every segment gets its own stream
seeded from a BLAKE2b digest of (seed, record id, offset, noise spec), so
dataset assembly needs no shared RNG state.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    InsufficientRecords,
    LengthMismatch,
    SignalTooShort,
    ZeroPowerClean,
    ZeroPowerNoise,
)
from .wfdb_io import RecordHeader, SignalRecord, SignalSpec

NORM_EPS = 1e-8
NOISE_KINDS = ("awgn", "bw", "em", "ma")
RECORD_NOISE_KINDS = ("bw", "em", "ma")

SEGSET_MAGIC = b"ASCSEG1"
METRICS_COLUMNS = (
    "record_id",
    "noise_kind",
    "input_snr_db",
    "snr_out_db",
    "snr_imp_db",
    "mse",
    "rmse",
    "prd_percent",
)


# ---------------------------------------------------------------- noise specs

@dataclass(frozen=True)
class NoiseSpec:
    """Noise to inject at a target SNR.

    ``kind`` is one of ``awgn``, ``bw``, ``em``, ``ma`` or a ``+``-joined
    mixture of at least two distinct kinds (``"em+bw"``). Record-based kinds
    draw a random crop from ``sources[kind]``.
    """

    kind: str
    target_snr_db: float
    sources: Mapping[str, np.ndarray] = field(default_factory=dict, compare=False, repr=False)
    seed: int = 0

    def __post_init__(self):
        comps = self.components
        for c in comps:
            if c not in NOISE_KINDS:
                raise ValueError(f"unknown noise kind {c!r}")
        if len(comps) > 1 and len(set(comps)) != len(comps):
            raise ValueError(f"mixture {self.kind!r} repeats a component")

    @property
    def components(self) -> tuple[str, ...]:
        return tuple(self.kind.lower().split("+"))

    @property
    def label(self) -> str:
        return "+".join(self.components)

    def key(self) -> str:
        return f"{self.label}@{self.target_snr_db!r}"


def derive_seed(*parts) -> int:
    h = hashlib.blake2b("|".join(str(p) for p in parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def gen_awgn(length: int, seed: int) -> np.ndarray:
    """I.i.d. standard normal samples from PCG64 seeded with ``seed``."""
    if length < 1:
        raise ValueError("length must be >= 1")
    return np.random.Generator(np.random.PCG64(seed)).standard_normal(length)


def power(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def _component_noise(kind: str, length: int, rng: np.random.Generator, sources) -> np.ndarray:
    if kind == "awgn":
        return rng.standard_normal(length)
    if kind not in sources:
        raise ValueError(f"noise kind {kind!r} needs a noise record")
    src = np.asarray(sources[kind], dtype=np.float64)
    if len(src) < length:
        raise SignalTooShort(f"noise record for {kind!r} has {len(src)} samples, need {length}")
    start = int(rng.integers(0, len(src) - length + 1))
    return src[start:start + length].copy()


def make_noise(length: int, spec: NoiseSpec, seed: int | None = None) -> np.ndarray:
    """Unscaled noise for ``spec``; mixtures are summed component-wise."""
    rng = np.random.Generator(np.random.PCG64(spec.seed if seed is None else seed))
    noise = np.zeros(length)
    for kind in spec.components:
        noise += _component_noise(kind, length, rng, spec.sources)
    return noise


def scale_to_snr(clean: np.ndarray, noise: np.ndarray, target_snr_db: float) -> np.ndarray:
    p_clean = power(clean)
    if p_clean == 0:
        raise ZeroPowerClean("clean signal has zero power")
    p_noise = power(noise)
    if p_noise == 0:
        raise ZeroPowerNoise("noise has zero power")
    return noise * math.sqrt(p_clean / (p_noise * 10.0 ** (target_snr_db / 10.0)))


def mix_noise(clean, spec: NoiseSpec, seed: int | None = None) -> np.ndarray:
    """Return ``clean + noise`` with the noise scaled to ``spec.target_snr_db``."""
    clean = np.asarray(clean, dtype=np.float64)
    if power(clean) == 0:
        raise ZeroPowerClean("clean signal has zero power")
    noise = make_noise(len(clean), spec, seed)
    return clean + scale_to_snr(clean, noise, spec.target_snr_db)


# ---------------------------------------------------------------- metrics

def _pair(f, u):
    f = np.asarray(f, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if f.shape != u.shape:
        raise LengthMismatch(f"shapes differ: {f.shape} vs {u.shape}")
    return f, u


def snr_out(clean, estimate) -> float:
    """10*log10(sum(f^2) / sum((f - u)^2)); +inf for an exact estimate."""
    f, u = _pair(clean, estimate)
    num = float(np.sum(f * f))
    if num == 0:
        raise ZeroPowerClean("clean signal has zero power")
    den = float(np.sum((f - u) ** 2))
    if den == 0:
        return math.inf
    return 10.0 * math.log10(num / den)


def snr_improvement(clean, noisy, estimate) -> float:
    return snr_out(clean, estimate) - snr_out(clean, noisy)


def mse(f, u) -> float:
    f, u = _pair(f, u)
    return float(np.mean((f - u) ** 2))


def rmse(f, u) -> float:
    return math.sqrt(mse(f, u))


def prd(f, u) -> float:
    f, u = _pair(f, u)
    den = float(np.sum(f * f))
    if den == 0:
        raise ZeroPowerClean("PRD undefined for a zero-power reference")
    return 100.0 * math.sqrt(float(np.sum((f - u) ** 2)) / den)


# ---------------------------------------------------------------- segmentation

def segment(signal, length: int, stride: int) -> list[np.ndarray]:
    x = np.asarray(getattr(signal, "samples_mv", signal), dtype=np.float64)
    if length < 1 or stride < 1:
        raise ValueError("length and stride must be >= 1")
    if len(x) < length:
        raise SignalTooShort(f"signal has {len(x)} samples, segment length is {length}")
    count = (len(x) - length) // stride + 1
    return [x[i * stride:i * stride + length].copy() for i in range(count)]


def normalize(x) -> tuple[np.ndarray, float, float]:
    x = np.asarray(x, dtype=np.float64)
    mean = float(np.mean(x))
    scale = max(float(np.std(x)), NORM_EPS)
    return (x - mean) / scale, mean, scale


def denormalize(y, mean: float, scale: float) -> np.ndarray:
    return np.asarray(y, dtype=np.float64) * scale + mean


@dataclass
class Segment:
    clean: np.ndarray
    noisy: np.ndarray
    norm_mean: float
    norm_scale: float
    record_id: str
    offset: int
    noise: NoiseSpec
    seed: int = 0


@dataclass
class SegmentSet:
    segments: list[Segment]
    split: str
    length: int

    def __len__(self):
        return len(self.segments)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(noisy, clean) stacked as (n, 1, L) float64 arrays."""
        if not self.segments:
            empty = np.zeros((0, 1, self.length))
            return empty, empty.copy()
        noisy = np.stack([s.noisy for s in self.segments])[:, None, :]
        clean = np.stack([s.clean for s in self.segments])[:, None, :]
        return noisy.astype(np.float64), clean.astype(np.float64)

    def record_ids(self) -> set[str]:
        return {s.record_id for s in self.segments}


def split_counts(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    """Record counts per split; each split keeps at least one record."""
    if n < 3:
        raise InsufficientRecords(f"need at least 3 records for a 3-way split, got {n}")
    total = float(sum(fractions))
    if total <= 0 or any(f < 0 for f in fractions):
        raise ValueError("split fractions must be non-negative with a positive sum")
    n_val = max(1, int(round(n * fractions[1] / total)))
    n_test = max(1, int(round(n * fractions[2] / total)))
    n_train = n - n_val - n_test
    if n_train < 1:
        n_train = 1
        while n_train + n_val + n_test > n:
            if n_val >= n_test and n_val > 1:
                n_val -= 1
            else:
                n_test -= 1
    return n_train, n_val, n_test


def _spec_with_seed(spec: NoiseSpec, seed: int) -> NoiseSpec:
    return NoiseSpec(spec.kind, spec.target_snr_db, spec.sources, seed)


def make_segments(record: SignalRecord, specs: Iterable[NoiseSpec], length: int,
                  stride: int, seed: int) -> list[Segment]:
    out = []
    windows = segment(record, length, stride)
    for i, window in enumerate(windows):
        offset = i * stride
        clean, mean, scale = normalize(window)
        for spec in specs:
            seg_seed = derive_seed(seed, record.record_id, offset, spec.key())
            noisy = mix_noise(clean, spec, seg_seed)
            out.append(Segment(clean, noisy, mean, scale, record.record_id, offset,
                               _spec_with_seed(spec, seg_seed), seg_seed))
    return out


def build_dataset(records: Sequence[SignalRecord], specs: Sequence[NoiseSpec],
                  length: int = 1024, stride: int = 512,
                  split_fractions: Sequence[float] = (0.8, 0.1, 0.1),
                  seed: int = 0) -> dict[str, SegmentSet]:
    """Record-wise train/val/test split with per-segment noise mixing.

    Records are shuffled by ``seed`` and partitioned before segmentation, so
    no record contributes to more than one split.
    """
    if len(records) < 3:
        raise InsufficientRecords(f"need at least 3 records, got {len(records)}")
    ids = [r.record_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("record ids must be unique")
    n_train, n_val, _ = split_counts(len(records), split_fractions)
    order = np.random.Generator(np.random.PCG64(derive_seed(seed, "split"))).permutation(len(records))
    # sort first so the split depends on the record set, not the input order
    by_id = sorted(records, key=lambda r: r.record_id)
    shuffled = [by_id[i] for i in order]
    groups = {
        "train": shuffled[:n_train],
        "val": shuffled[n_train:n_train + n_val],
        "test": shuffled[n_train + n_val:],
    }
    return {
        name: SegmentSet(
            [s for rec in recs for s in make_segments(rec, specs, length, stride, seed)],
            name,
            length,
        )
        for name, recs in groups.items()
    }


# ---------------------------------------------------------------- SegmentSet I/O

def _spec_to_json(spec: NoiseSpec) -> dict:
    return {"kind": spec.label, "target_snr_db": spec.target_snr_db, "seed": spec.seed}


def save_segment_set(segset: SegmentSet, path: str | os.PathLike) -> tuple[str, str]:
    """Write ``<path>`` (binary payload) and ``<path>.json`` (manifest).

    Layout: magic ``ASCSEG1``, u32 segment count, u32 segment length, then per
    segment the clean and noisy samples as little-endian f32.
    """
    path = os.fspath(path)
    n, length = len(segset.segments), segset.length
    body = bytearray(SEGSET_MAGIC)
    body += struct.pack("<II", n, length)
    for s in segset.segments:
        body += np.asarray(s.clean, dtype="<f4").tobytes()
        body += np.asarray(s.noisy, dtype="<f4").tobytes()
    manifest = {
        "split": segset.split,
        "length": length,
        "count": n,
        "segments": [
            {
                "record_id": s.record_id,
                "offset": s.offset,
                "norm_mean": s.norm_mean,
                "norm_scale": s.norm_scale,
                "seed": s.seed,
                "noise": _spec_to_json(s.noise),
            }
            for s in segset.segments
        ],
    }
    _atomic_write(path, bytes(body))
    _atomic_write(path + ".json", json.dumps(manifest, indent=1, sort_keys=True).encode())
    return path, path + ".json"


def load_segment_set(path: str | os.PathLike) -> SegmentSet:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    with open(path + ".json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if blob[:len(SEGSET_MAGIC)] != SEGSET_MAGIC:
        raise ValueError(f"{path}: not a segment set (bad magic)")
    n, length = struct.unpack_from("<II", blob, len(SEGSET_MAGIC))
    start = len(SEGSET_MAGIC) + 8
    if len(blob) != start + n * 2 * length * 4:
        raise ValueError(f"{path}: payload size does not match header")
    if n != manifest["count"] or length != manifest["length"]:
        raise ValueError(f"{path}: manifest disagrees with payload header")
    data = np.frombuffer(blob, dtype="<f4", offset=start).astype(np.float64).reshape(n, 2, length)
    segments = []
    for i, meta in enumerate(manifest["segments"]):
        nz = meta["noise"]
        spec = NoiseSpec(nz["kind"], float(nz["target_snr_db"]), {}, int(nz["seed"]))
        segments.append(Segment(data[i, 0].copy(), data[i, 1].copy(), meta["norm_mean"],
                                meta["norm_scale"], meta["record_id"], meta["offset"],
                                spec, meta["seed"]))
    return SegmentSet(segments, manifest["split"], length)


def _atomic_write(path: str, payload: bytes) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------- reports

@dataclass
class MetricsReport:
    rows: list[dict]

    @property
    def aggregates(self) -> list[dict]:
        """Arithmetic mean of every metric per (noise_kind, input_snr_db)."""
        groups: dict[tuple, list[dict]] = defaultdict(list)
        for r in self.rows:
            groups[(r["noise_kind"], r["input_snr_db"])].append(r)
        out = []
        for (kind, snr), members in sorted(groups.items()):
            agg = {"noise_kind": kind, "input_snr_db": snr, "n_records": len(members)}
            for col in METRICS_COLUMNS[3:]:
                agg[col] = float(np.mean([m[col] for m in members]))
            out.append(agg)
        return out

    def to_csv(self, path) -> None:
        write_csv(path, METRICS_COLUMNS, self.rows)

    @classmethod
    def from_csv(cls, path) -> "MetricsReport":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
                raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
            rows = []
            for r in reader:
                row = {"record_id": r["record_id"], "noise_kind": r["noise_kind"]}
                for col in METRICS_COLUMNS[2:]:
                    row[col] = float(r[col])
                rows.append(row)
        return cls(rows)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Iterable[Mapping]) -> None:
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(_fmt(r[c]) for c in columns))
    _atomic_write(os.fspath(path), ("\n".join(lines) + "\n").encode())


def metrics_row(record_id: str, noise_kind: str, input_snr_db: float,
                clean, noisy, estimate) -> dict:
    return {
        "record_id": record_id,
        "noise_kind": noise_kind,
        "input_snr_db": float(input_snr_db),
        "snr_out_db": snr_out(clean, estimate),
        "snr_imp_db": snr_improvement(clean, noisy, estimate),
        "mse": mse(clean, estimate),
        "rmse": rmse(clean, estimate),
        "prd_percent": prd(clean, estimate),
    }


# ---------------------------------------------------------------- surrogates

def synthetic_ecg(n_samples: int, fs: float = 360.0, seed: int = 0) -> np.ndarray:
    """ECG-like surrogate in mV: summed sinusoids plus QRS and ectopic spikes.

    Beat-to-beat intervals jitter around a seed-chosen heart rate; roughly one
    beat in twelve is replaced by a wide, premature, inverted complex.
    """
    rng = np.random.Generator(np.random.PCG64(derive_seed("synthetic_ecg", seed)))
    t = np.arange(n_samples) / fs
    hr = rng.uniform(55, 95) / 60.0
    x = np.zeros(n_samples)
    for k, amp in enumerate((0.08, 0.05, 0.03), start=1):
        x += amp * np.sin(2 * np.pi * k * hr * t + rng.uniform(0, 2 * np.pi))
    beat = rng.uniform(0, 1 / hr)
    while beat < t[-1] + 1:
        ectopic = rng.uniform() < 1 / 12
        if ectopic:
            beat -= 0.25 / hr
            x += -0.9 * np.exp(-0.5 * ((t - beat) / 0.035) ** 2)
            x += 0.25 * np.exp(-0.5 * ((t - beat - 0.22) / 0.06) ** 2)
        else:
            x += 0.15 * np.exp(-0.5 * ((t - beat + 0.16) / 0.025) ** 2)  # P
            x += -0.12 * np.exp(-0.5 * ((t - beat + 0.025) / 0.008) ** 2)  # Q
            x += 1.1 * np.exp(-0.5 * ((t - beat) / 0.011) ** 2)  # R
            x += -0.2 * np.exp(-0.5 * ((t - beat - 0.03) / 0.01) ** 2)  # S
            x += 0.3 * np.exp(-0.5 * ((t - beat - 0.25) / 0.05) ** 2)  # T
        beat += (1 / hr) * rng.normal(1.0, 0.04) + (0.25 / hr if ectopic else 0.0)
    return x


def synthetic_record(name: str, n_samples: int, fs: float = 360.0, seed: int = 0) -> SignalRecord:
    header = RecordHeader(name, 1, fs, n_samples,
                          (SignalSpec(f"{name}.dat", 212, 200.0, 1024, "mV", "synthetic"),))
    return SignalRecord(header, 0, synthetic_ecg(n_samples, fs, seed), "")
