"""Log Mel-filterbank features, sliding mean normalization and energy VAD."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp

from svkit.audio import Waveform
from svkit.errors import ConfigError

FEATURE_KINDS = ("mfb", "encoder-latent", "hidden-state")


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    """Time-major ``T x F`` frame matrix."""

    frames: np.ndarray
    frame_shift: float
    frame_length: float
    feature_kind: str = "mfb"

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise ValueError(f"frames must be T x F, got shape {frames.shape}")
        if self.frame_shift <= 0:
            raise ValueError("frame_shift must be positive")
        if self.feature_kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {self.feature_kind!r}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("feature frames contain non-finite values")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class MfbConfig:
    n_mels: int = 64
    frame_length: float = 0.025
    frame_shift: float = 0.010
    f_min: float = 20.0
    f_max: float = 3700.0
    log_floor: float = 1e-10

    def validate(self, sample_rate: int) -> None:
        if self.n_mels < 1:
            raise ConfigError("n_mels must be >= 1")
        if not 0 <= self.f_min < self.f_max:
            raise ConfigError(f"need 0 <= f_min < f_max, got {self.f_min}, {self.f_max}")
        if self.f_max > sample_rate / 2:
            raise ConfigError(f"f_max {self.f_max} Hz exceeds Nyquist {sample_rate / 2} Hz")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")
        if self.frame_shift <= 0 or self.frame_length <= 0:
            raise ConfigError("frame length and shift must be positive")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MfbConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    return edges[1:-1]


def frame_params(cfg: MfbConfig, sample_rate: int) -> tuple[int, int, int]:
    """Window length, hop and FFT size in samples."""
    win = int(round(cfg.frame_length * sample_rate))
    hop = int(round(cfg.frame_shift * sample_rate))
    n_fft = 1 << max(0, (win - 1).bit_length())
    return win, hop, n_fft


def mel_filterbank(cfg: MfbConfig, sample_rate: int, n_fft: int) -> np.ndarray:
    """Triangular HTK-mel filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def num_frames(n_samples: int, win: int, hop: int) -> int:
    return (n_samples - win) // hop + 1 if n_samples >= win else 0


def mel_power(w: Waveform, cfg: MfbConfig) -> np.ndarray:
    """Mel-weighted power spectrum per frame, before the log."""
    cfg.validate(w.sample_rate)
    win, hop, n_fft = frame_params(cfg, w.sample_rate)
    if num_frames(len(w), win, hop) == 0:
        return np.zeros((0, cfg.n_mels))
    frames = sliding_window_view(w.samples, win)[::hop]
    window = np.hanning(win + 1)[:-1]
    spec = np.fft.rfft(frames * window, n=n_fft, axis=1)
    power = spec.real**2 + spec.imag**2
    return power @ mel_filterbank(cfg, w.sample_rate, n_fft).T


def compute_mfb(w: Waveform, cfg: MfbConfig = MfbConfig()) -> FeatureSequence:
    """Log Mel-filterbank energies, Hann window, no pre-emphasis."""
    mel = mel_power(w, cfg)
    return FeatureSequence(np.log(mel + cfg.log_floor), cfg.frame_shift, cfg.frame_length, "mfb")


def sliding_mean_normalize(f: FeatureSequence, window: float = 3.0) -> FeatureSequence:
    """Subtract a centered running mean spanning ``window`` seconds.

    The window is truncated at the sequence edges. When the whole sequence fits
    in one window the global mean is subtracted instead.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    x = f.frames
    T = x.shape[0]
    if T == 0:
        return f
    if T * f.frame_shift <= window:
        return replace(f, frames=x - x.mean(axis=0))
    half = int(round(window / f.frame_shift)) // 2
    csum = np.vstack([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
    idx = np.arange(T)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, T)
    means = (csum[hi] - csum[lo]) / (hi - lo)[:, None]
    return replace(f, frames=x - means)


def frame_log_energy(f: FeatureSequence) -> np.ndarray:
    return logsumexp(f.frames, axis=1)


def energy_vad(f: FeatureSequence, offset_db: float = 40.0, log_floor: float = 1e-10) -> np.ndarray:
    """Boolean speech mask over the frames of an un-normalized MFB sequence.

    A frame is speech when its log-energy is within ``offset_db`` of the
    loudest frame. Frames sitting exactly at the log floor (digital silence)
    are never speech.
    """
    T = len(f)
    if T == 0:
        return np.zeros(0, dtype=bool)
    energy = frame_log_energy(f)
    silence = logsumexp(np.full(f.dim, np.log(log_floor)))
    threshold = energy.max() - offset_db * np.log(10.0) / 10.0
    return (energy > threshold) & (energy > silence)


def speech_samples(w: Waveform, mask: np.ndarray, cfg: MfbConfig) -> Waveform:
    """Concatenate the hop-sized sample blocks of the frames marked speech.

    The last speech frame contributes its full window so no trailing samples
    are lost. Returns ``w`` unchanged when the mask selects nothing.
    """
    if not mask.any():
        return w
    win, hop, _ = frame_params(cfg, w.sample_rate)
    keep = np.zeros(len(w), dtype=bool)
    for i in np.flatnonzero(mask):
        keep[i * hop : i * hop + hop] = True
    last = np.flatnonzero(mask)[-1]
    keep[last * hop : last * hop + win] = True
    return w.with_samples(w.samples[keep])
