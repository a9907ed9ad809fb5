import struct
import wave

import numpy as np
import pytest


def write_pcm16(path, ints, sample_rate=8000, channels=1):
    """Reference writer built on the stdlib ``wave`` module."""
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(np.asarray(ints, dtype="<i2").tobytes())


def write_float32(path, samples, sample_rate=8000):
    data = np.asarray(samples, dtype="<f4").tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(data), b"WAVE",
        b"fmt ", 16, 3, 1, sample_rate, 4 * sample_rate, 4, 32,
        b"data", len(data),
    )
    with open(path, "wb") as fh:
        fh.write(header + data)


def sine(freq, duration, sample_rate=8000, amp=1.0, phase=0.0):
    t = np.arange(int(round(duration * sample_rate))) / sample_rate
    return amp * np.sin(2 * np.pi * freq * t + phase)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
