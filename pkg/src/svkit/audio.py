"""Mono RIFF/WAVE input and output, and random cropping of training chunks."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from svkit.errors import ChunkTooShortError, ConfigError, DataError, WavDecodeError

PIPELINE_RATES = (8000, 16000)

_FORMAT_PCM = 0x0001
_FORMAT_FLOAT = 0x0003
_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono audio samples in [-1, 1] at ``sample_rate`` Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DataError(f"waveform must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise DataError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples: np.ndarray) -> "Waveform":
        return Waveform(samples, self.sample_rate)


def check_pipeline_rate(w: Waveform, expected: int) -> None:
    """Refuse rate mismatches instead of resampling."""
    if expected not in PIPELINE_RATES:
        raise ConfigError(f"pipeline sample rate must be one of {PIPELINE_RATES}, got {expected}")
    if w.sample_rate != expected:
        raise DataError(f"sample rate {w.sample_rate} Hz does not match pipeline rate {expected} Hz")


def _iter_chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        chunk_id, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavDecodeError(f"truncated {chunk_id!r} chunk: expected {size} bytes, found {len(body)}")
        yield chunk_id, body
        pos += 8 + size + (size & 1)


def read_wav(path) -> Waveform:
    """Decode a mono PCM16 or float32 WAVE file.

    16-bit samples are scaled by 1/32768; float samples are clamped to [-1, 1].
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavDecodeError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    pcm = None
    for chunk_id, body in _iter_chunks(data):
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise WavDecodeError(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == _FORMAT_EXTENSIBLE:
                if len(body) < 40:
                    raise WavDecodeError(f"{path}: extensible fmt chunk too short")
                (sub_tag,) = struct.unpack_from("<H", body, 24)
                fmt = (sub_tag,) + fmt[1:]
        elif chunk_id == b"data":
            pcm = body
            break
    if fmt is None:
        raise WavDecodeError(f"{path}: missing fmt chunk")
    if pcm is None:
        raise WavDecodeError(f"{path}: missing data chunk")

    tag, channels, rate, _, block_align, bits = fmt
    if channels != 1:
        raise WavDecodeError(f"{path}: unsupported channel count {channels}")
    if tag == _FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _FORMAT_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), None
    else:
        raise WavDecodeError(f"{path}: unsupported encoding (format tag {tag:#06x}, {bits} bits)")
    if len(pcm) % dtype.itemsize:
        raise WavDecodeError(f"{path}: data chunk is not a whole number of samples")

    raw = np.frombuffer(pcm, dtype=dtype)
    if scale is not None:
        samples = raw.astype(np.float64) * scale
    else:
        samples = raw.astype(np.float64)
        if not np.all(np.isfinite(samples)):
            raise WavDecodeError(f"{path}: non-finite float samples")
        samples = np.clip(samples, -1.0, 1.0)
    return Waveform(samples, rate)


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def write_wav(w: Waveform, path) -> None:
    """Write ``w`` as 16-bit PCM."""
    pcm = quantize_pcm16(w.samples).tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(pcm), b"WAVE",
        b"fmt ", 16, _FORMAT_PCM, 1, w.sample_rate, 2 * w.sample_rate, 2, 16,
        b"data", len(pcm),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(pcm)
        if len(pcm) & 1:
            fh.write(b"\x00")


@dataclass(frozen=True)
class ChunkSpec:
    """Allowed training-chunk duration range, in seconds."""

    min_dur: float
    max_dur: float

    def __post_init__(self):
        if not 0 < self.min_dur <= self.max_dur:
            raise ConfigError(f"chunk range must satisfy 0 < min <= max, got [{self.min_dur}, {self.max_dur}]")


def random_chunk(w: Waveform, spec: ChunkSpec, rng) -> Waveform:
    """Crop a contiguous slice whose duration is uniform in the allowed range.

    ``rng`` is a :class:`numpy.random.Generator` or an integer seed.
    """
    rng = np.random.default_rng(rng)
    n = len(w)
    sr = w.sample_rate
    lo = int(np.ceil(spec.min_dur * sr - 1e-9))
    if n < lo:
        raise ChunkTooShortError(
            f"waveform of {w.duration:.3f} s is shorter than the minimum chunk of {spec.min_dur} s"
        )
    hi = max(lo, min(int(np.floor(spec.max_dur * sr + 1e-9)), n))
    dur = rng.uniform(lo / sr, hi / sr) if hi > lo else lo / sr
    length = int(np.clip(round(dur * sr), lo, hi))
    start = int(rng.integers(0, n - length + 1))
    return w.with_samples(w.samples[start : start + length])
