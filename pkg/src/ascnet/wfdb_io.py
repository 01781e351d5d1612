"""Reader for WFDB header (.hea) and format-212 signal (.dat) files.

Only single-segment records whose signals are stored in format 212 are
decoded. Format 212 packs two 12-bit two's-complement samples into each
byte triple::

    sample_A = ((b1 & 0x0F) << 8) | b0
    sample_B = ((b1 & 0xF0) << 4) | b2

Samples of all signals stored in one file are interleaved in acquisition
order (s0[0], s1[0], s0[1], s1[1], ...).
"""
from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ChannelOutOfRange,
    MalformedHeader,
    TruncatedFile,
    UnsupportedFormat,
    ZeroGain,
)

SUPPORTED_FORMAT = 212
DEFAULT_GAIN = 200.0

# gain field: "200", "200(0)", "200/mV", "200(-12)/mV"
_GAIN_RE = re.compile(r"^([-+]?[0-9.eE+-]+?)(?:\(([-+]?\d+)\))?(?:/(\S+))?$")


@dataclass(frozen=True)
class SignalSpec:
    file_name: str
    format_code: int
    gain: float
    baseline: int
    units_label: str = "mV"
    description: str = ""
    byte_offset: int = 0


@dataclass(frozen=True)
class RecordHeader:
    record_name: str
    n_signals: int
    sampling_rate: float
    n_samples: int
    signals: tuple[SignalSpec, ...] = field(default_factory=tuple)


@dataclass(frozen=True)
class SignalRecord:
    header: RecordHeader
    channel_index: int
    samples_mv: np.ndarray
    source_path: str = ""

    @property
    def record_id(self) -> str:
        return self.header.record_name

    @property
    def sampling_rate(self) -> float:
        return self.header.sampling_rate

    def __len__(self) -> int:
        return len(self.samples_mv)


def _number(token: str, what: str, line_no: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise MalformedHeader(f"line {line_no}: non-numeric {what} {token!r}") from None


def _parse_signal_line(tokens: list[str], line_no: int) -> SignalSpec:
    if len(tokens) < 2:
        raise MalformedHeader(f"line {line_no}: signal line needs file name and format")
    file_name = tokens[0]

    fmt_token = tokens[1]
    m = re.match(r"^(\d+)(?:x\d+)?(?::\d+)?(?:\+(\d+))?$", fmt_token)
    if m is None:
        raise MalformedHeader(f"line {line_no}: bad format field {fmt_token!r}")
    format_code = int(m.group(1))
    byte_offset = int(m.group(2) or 0)

    gain = DEFAULT_GAIN
    baseline = None
    units = "mV"
    if len(tokens) > 2:
        g = _GAIN_RE.match(tokens[2])
        if g is None:
            raise MalformedHeader(f"line {line_no}: bad gain field {tokens[2]!r}")
        gain = _number(g.group(1), "gain", line_no)
        if g.group(2) is not None:
            baseline = int(g.group(2))
        if g.group(3):
            units = g.group(3)
        if gain == 0:
            raise MalformedHeader(f"line {line_no}: gain must be nonzero")
    # tokens[3] is ADC resolution, tokens[4] ADC zero
    if baseline is None and len(tokens) > 4:
        baseline = int(_number(tokens[4], "ADC zero", line_no))
    for idx, what in ((3, "ADC resolution"), (5, "initial value"), (6, "checksum"), (7, "block size")):
        if len(tokens) > idx:
            _number(tokens[idx], what, line_no)
    description = " ".join(tokens[8:]) if len(tokens) > 8 else ""
    return SignalSpec(
        file_name=file_name,
        format_code=format_code,
        gain=gain,
        baseline=0 if baseline is None else baseline,
        units_label=units,
        description=description,
        byte_offset=byte_offset,
    )


def parse_header(text: str) -> RecordHeader:
    """Parse the contents of a .hea file.

    Comment lines (starting with ``#``) are skipped. A baseline given in
    parentheses after the gain wins; otherwise the ADC-zero field is used,
    and a header carrying neither gets baseline 0.
    """
    lines = [
        (i + 1, ln.strip())
        for i, ln in enumerate(text.splitlines())
        if ln.strip() and not ln.strip().startswith("#")
    ]
    if not lines:
        raise MalformedHeader("missing record line")

    line_no, record_line = lines[0]
    tokens = record_line.split()
    if len(tokens) < 2:
        raise MalformedHeader(f"line {line_no}: record line needs name and signal count")
    name = tokens[0]
    if "/" in name:
        raise MalformedHeader(f"line {line_no}: multi-segment records are not supported")
    n_signals = int(_number(tokens[1], "signal count", line_no))
    if n_signals < 1:
        raise MalformedHeader(f"line {line_no}: record must have at least one signal")

    sampling_rate = 250.0
    if len(tokens) > 2:
        # "360", "360/..." or "360(0)"
        sampling_rate = _number(re.split(r"[/(]", tokens[2])[0], "sampling rate", line_no)
    if sampling_rate <= 0:
        raise MalformedHeader(f"line {line_no}: sampling rate must be positive")
    n_samples = 0
    if len(tokens) > 3:
        n_samples = int(_number(tokens[3], "sample count", line_no))
        if n_samples < 0:
            raise MalformedHeader(f"line {line_no}: negative sample count")

    signal_lines = lines[1:1 + n_signals]
    if len(signal_lines) < n_signals:
        raise MalformedHeader(
            f"record declares {n_signals} signals but has {len(signal_lines)} signal lines"
        )
    signals = tuple(_parse_signal_line(ln.split(), no) for no, ln in signal_lines)
    return RecordHeader(name, n_signals, sampling_rate, n_samples, signals)


def decode_format212(data: bytes, n_samples: int, n_signals: int) -> np.ndarray:
    """Unpack format-212 bytes into raw ADC codes of shape (n_signals, n_samples)."""
    if n_samples < 0 or n_signals < 1:
        raise ValueError("n_samples must be >= 0 and n_signals >= 1")
    total = n_samples * n_signals
    n_triples = (total + 1) // 2
    needed = 3 * n_triples
    if len(data) < needed:
        raise TruncatedFile(f"need {needed} bytes for {total} samples, got {len(data)}")

    b = np.frombuffer(bytes(data[:needed]), dtype=np.uint8).reshape(-1, 3).astype(np.int32)
    out = np.empty(2 * n_triples, dtype=np.int32)
    out[0::2] = ((b[:, 1] & 0x0F) << 8) | b[:, 0]
    out[1::2] = ((b[:, 1] & 0xF0) << 4) | b[:, 2]
    out[out >= 2048] -= 4096
    # odd total: the last value is padding
    return out[:total].reshape(n_samples, n_signals).T.copy()


def encode_format212(raw: np.ndarray) -> bytes:
    """Pack raw ADC codes (n_signals, n_samples) into format-212 bytes.

    Inverse of :func:`decode_format212`; used to build fixtures and synthetic
    records. An odd sample total is padded with one zero sample.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=np.int64))
    flat = raw.T.reshape(-1)
    if flat.size and (flat.min() < -2048 or flat.max() > 2047):
        raise ValueError("format 212 holds values in [-2048, 2047]")
    if flat.size % 2:
        flat = np.append(flat, 0)
    u = (flat & 0xFFF).reshape(-1, 2)
    a, c = u[:, 0], u[:, 1]
    triples = np.stack([a & 0xFF, ((a >> 8) & 0x0F) | ((c >> 4) & 0xF0), c & 0xFF], axis=1)
    return triples.astype(np.uint8).tobytes()


def to_physical(raw, gain: float, baseline: int) -> np.ndarray:
    if gain == 0:
        raise ZeroGain("gain must be nonzero")
    return (np.asarray(raw, dtype=np.float64) - baseline) / gain


def load_record(header_path: str | os.PathLike, channel: int = 0) -> SignalRecord:
    """Read one channel of a WFDB record in millivolts."""
    header_path = os.fspath(header_path)
    if not header_path.endswith(".hea"):
        header_path += ".hea"
    with open(header_path, encoding="ascii", errors="replace") as fh:
        text = fh.read()
    try:
        header = parse_header(text)
    except MalformedHeader as exc:
        raise MalformedHeader(f"{header_path}: {exc}") from None
    if not 0 <= channel < header.n_signals:
        raise ChannelOutOfRange(
            f"channel {channel} requested but {header.record_name} has {header.n_signals} signals"
        )
    spec = header.signals[channel]
    if spec.format_code != SUPPORTED_FORMAT:
        raise UnsupportedFormat(
            f"{header.record_name} channel {channel}: format {spec.format_code} is not supported"
        )

    # signals sharing a file are interleaved
    siblings = [i for i, s in enumerate(header.signals) if s.file_name == spec.file_name]
    if any(header.signals[i].format_code != SUPPORTED_FORMAT for i in siblings):
        raise UnsupportedFormat(f"{spec.file_name}: mixed formats in one signal file")
    dat_path = os.path.join(os.path.dirname(header_path), spec.file_name)
    with open(dat_path, "rb") as fh:
        fh.seek(spec.byte_offset)
        payload = fh.read(3 * math.ceil(header.n_samples * len(siblings) / 2))
    try:
        raw = decode_format212(payload, header.n_samples, len(siblings))
    except TruncatedFile as exc:
        raise TruncatedFile(f"{dat_path}: {exc}") from None
    samples = to_physical(raw[siblings.index(channel)], spec.gain, spec.baseline)
    return SignalRecord(header, channel, samples, os.path.abspath(header_path))


def write_record(
    directory: str | os.PathLike,
    name: str,
    signals_mv: np.ndarray,
    sampling_rate: float = 360.0,
    gain: float = DEFAULT_GAIN,
    baseline: int = 1024,
    descriptions: list[str] | None = None,
) -> str:
    """Write a format-212 record (header + .dat); returns the header path.

    Values are quantized to ADC codes and clipped to the 12-bit range.
    """
    signals_mv = np.atleast_2d(np.asarray(signals_mv, dtype=np.float64))
    n_sig, n = signals_mv.shape
    raw = np.clip(np.round(signals_mv * gain + baseline), -2048, 2047).astype(np.int64)
    directory = os.fspath(directory)
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, f"{name}.dat"), "wb") as fh:
        fh.write(encode_format212(raw))
    descriptions = descriptions or [f"sig{i}" for i in range(n_sig)]
    lines = [f"{name} {n_sig} {sampling_rate:g} {n}"]
    for i in range(n_sig):
        g = f"{gain:g}".replace("e+", "e")
        lines.append(
            f"{name}.dat 212 {g} 12 {baseline} {int(raw[i, 0]) if n else 0} 0 0 {descriptions[i]}"
        )
    hea = os.path.join(directory, f"{name}.hea")
    with open(hea, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
    return hea
