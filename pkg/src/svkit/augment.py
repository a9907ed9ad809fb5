"""Online raw-audio augmentation: noise, reverberation, masking, clipping.

:func:`apply_policy` draws an independent Bernoulli decision per
augmentation type and applies the chosen ones in a fixed order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from svkit.audio import Waveform, read_wav
from svkit.errors import ConfigError, DataError

AUGMENT_ORDER = ("noise", "rir", "freq_mask", "time_mask", "clip")


def _power(x: np.ndarray) -> float:
    return float(np.mean(x * x))


def _match_length(noise: np.ndarray, n: int) -> np.ndarray:
    if noise.shape[0] >= n:
        return noise[:n]
    return np.resize(noise, n)


def snr_gain(w: Waveform, noise: Waveform, snr_db: float) -> float:
    """Gain applied to ``noise`` (after looping/cropping) to hit ``snr_db``."""
    if w.sample_rate != noise.sample_rate:
        raise DataError("signal and noise sample rates differ")
    p_sig = _power(w.samples)
    p_noise = _power(_match_length(noise.samples, len(w)))
    if p_sig == 0.0:
        raise DataError("cannot mix noise at an SNR into a zero-power signal")
    if p_noise == 0.0:
        raise DataError("noise segment has zero power")
    return float(np.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0))))


def mix_noise_at_snr(w: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    g = snr_gain(w, noise, snr_db)
    mixed = w.samples + g * _match_length(noise.samples, len(w))
    return w.with_samples(np.clip(mixed, -1.0, 1.0))


def convolve_rir(w: Waveform, rir: Waveform) -> Waveform:
    """Reverberate ``w``; output keeps the input length and peak amplitude."""
    if w.sample_rate != rir.sample_rate:
        raise DataError("signal and RIR sample rates differ")
    if len(rir) == 0:
        raise DataError("empty room impulse response")
    n = len(w)
    if n == 0:
        return w
    out = signal.oaconvolve(w.samples, rir.samples)[:n]
    peak_in = np.max(np.abs(w.samples))
    peak_out = np.max(np.abs(out))
    if peak_out > 0:
        out = out * (peak_in / peak_out)
    return w.with_samples(out)


def synthetic_rir(sample_rate: int, t60: float = 0.3, rng=None) -> Waveform:
    """Exponentially decaying white noise with a unit direct path."""
    rng = np.random.default_rng(rng)
    n = max(1, int(round(t60 * sample_rate)))
    t = np.arange(n) / sample_rate
    # -60 dB at t60 in amplitude: exp(-ln(1000) t / t60)
    h = rng.standard_normal(n) * np.exp(-np.log(1000.0) * t / t60) * 0.3
    h[0] = 1.0
    return Waveform(h / np.max(np.abs(h)), sample_rate)


def _stft_params(sample_rate: int) -> tuple[int, int]:
    nperseg = 1 << int(np.ceil(np.log2(0.032 * sample_rate)))
    return nperseg, 3 * nperseg // 4


def freq_mask(w: Waveform, center_hz: float, width_hz: float) -> Waveform:
    """Zero the STFT bins within ``center_hz +- width_hz / 2`` in every frame."""
    nyquist = w.sample_rate / 2
    lo, hi = center_hz - width_hz / 2, center_hz + width_hz / 2
    if width_hz < 0 or lo <= 0 or hi >= nyquist:
        raise DataError(f"mask band [{lo:.1f}, {hi:.1f}] Hz is outside (0, {nyquist:.0f}) Hz")
    n = len(w)
    nperseg, noverlap = _stft_params(w.sample_rate)
    if n < nperseg:
        nperseg, noverlap = max(n, 4), 3 * max(n, 4) // 4
    freqs, _, spec = signal.stft(w.samples, fs=w.sample_rate, window="hann", nperseg=nperseg, noverlap=noverlap)
    if width_hz > 0:
        spec[(freqs >= lo) & (freqs <= hi), :] = 0.0
    _, out = signal.istft(spec, fs=w.sample_rate, window="hann", nperseg=nperseg, noverlap=noverlap)
    out = out[:n]
    if out.shape[0] < n:
        out = np.pad(out, (0, n - out.shape[0]))
    return w.with_samples(out)


def time_mask(w: Waveform, start: float, span: float) -> Waveform:
    if start < 0 or span < 0 or start + span > w.duration + 1e-9:
        raise DataError(f"time mask [{start}, {start + span}] s exceeds duration {w.duration:.3f} s")
    i0 = int(round(start * w.sample_rate))
    i1 = min(int(round((start + span) * w.sample_rate)), len(w))
    out = w.samples.copy()
    out[i0:i1] = 0.0
    return w.with_samples(out)


def clip_distort(w: Waveform, lower_pct: float, upper_pct: float) -> Waveform:
    """Clamp samples to two percentiles of their distribution, then restore the peak."""
    if not 0 <= lower_pct < upper_pct <= 100:
        raise DataError(f"need 0 <= lower < upper <= 100, got {lower_pct}, {upper_pct}")
    x = w.samples
    peak = np.max(np.abs(x)) if len(x) else 0.0
    if peak == 0.0:
        return w
    lo, hi = np.percentile(x, [lower_pct, upper_pct])
    out = np.clip(x, lo, hi)
    out_peak = np.max(np.abs(out))
    if out_peak > 0:
        out = out * (peak / out_peak)
    return w.with_samples(out)


@dataclass(frozen=True)
class AugmentPolicy:
    p_noise: float = 0.25
    p_rir: float = 0.25
    p_freq_mask: float = 0.25
    p_time_mask: float = 0.25
    p_clip: float = 0.25
    snr_range_db: tuple[float, float] = (0.0, 20.0)
    freq_mask_width_range: tuple[float, float] = (50.0, 800.0)
    time_mask_frac_range: tuple[float, float] = (0.0, 0.1)
    clip_lower_range: tuple[float, float] = (0.0, 40.0)
    clip_upper_range: tuple[float, float] = (60.0, 100.0)
    noise_pool: tuple[Waveform, ...] = field(default=(), repr=False)
    rir_pool: tuple[Waveform, ...] = field(default=(), repr=False)

    def __post_init__(self):
        for name in ("p_noise", "p_rir", "p_freq_mask", "p_time_mask", "p_clip"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {p}")
        for name in ("snr_range_db", "freq_mask_width_range", "time_mask_frac_range",
                     "clip_lower_range", "clip_upper_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: low {lo} exceeds high {hi}")
            if name != "snr_range_db" and lo < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.clip_lower_range[1] >= self.clip_upper_range[0]:
            raise ConfigError("clip lower percentile range must lie below the upper range")
        if self.clip_upper_range[1] > 100:
            raise ConfigError("clip percentiles must not exceed 100")
        if self.p_noise > 0 and not self.noise_pool:
            raise ConfigError("p_noise > 0 requires a non-empty noise pool")
        if self.p_rir > 0 and not self.rir_pool:
            raise ConfigError("p_rir > 0 requires a non-empty RIR pool")

    @property
    def probabilities(self) -> tuple[float, ...]:
        return (self.p_noise, self.p_rir, self.p_freq_mask, self.p_time_mask, self.p_clip)


@dataclass(frozen=True)
class AppliedAugmentation:
    kind: str
    params: dict

    def to_dict(self) -> dict:
        return {"type": self.kind, **self.params}


def apply_policy(w: Waveform, policy: AugmentPolicy, seed) -> tuple[Waveform, list[AppliedAugmentation]]:
    """Apply the policy's augmentation chain; deterministic in ``seed``.

    All five Bernoulli decisions are drawn first, so whether a type fires does
    not depend on the parameters sampled for the others.
    """
    rng = np.random.default_rng(seed)
    fire = rng.random(len(AUGMENT_ORDER)) < np.asarray(policy.probabilities)
    record: list[AppliedAugmentation] = []
    nyquist = w.sample_rate / 2

    if fire[0]:
        idx = int(rng.integers(len(policy.noise_pool)))
        snr = float(rng.uniform(*policy.snr_range_db))
        w = mix_noise_at_snr(w, policy.noise_pool[idx], snr)
        record.append(AppliedAugmentation("noise", {"noise_index": idx, "snr_db": snr}))
    if fire[1]:
        idx = int(rng.integers(len(policy.rir_pool)))
        w = convolve_rir(w, policy.rir_pool[idx])
        record.append(AppliedAugmentation("rir", {"rir_index": idx}))
    if fire[2]:
        width = float(rng.uniform(*policy.freq_mask_width_range))
        width = min(width, 0.9 * nyquist)
        margin = width / 2 + 1.0
        center = float(rng.uniform(margin, nyquist - margin))
        w = freq_mask(w, center, width)
        record.append(AppliedAugmentation("freq_mask", {"center_hz": center, "width_hz": width}))
    if fire[3]:
        span = float(rng.uniform(*policy.time_mask_frac_range)) * w.duration
        start = float(rng.uniform(0.0, w.duration - span))
        w = time_mask(w, start, span)
        record.append(AppliedAugmentation("time_mask", {"start_s": start, "span_s": span}))
    if fire[4]:
        lower = float(rng.uniform(*policy.clip_lower_range))
        upper = float(rng.uniform(*policy.clip_upper_range))
        w = clip_distort(w, lower, upper)
        record.append(AppliedAugmentation("clip", {"lower_pct": lower, "upper_pct": upper}))
    return w, record


def load_pool(directory, sample_rate: int) -> tuple[Waveform, ...]:
    """All ``*.wav`` files under ``directory`` (sorted), checked for rate."""
    paths = sorted(Path(directory).glob("*.wav"))
    if not paths:
        raise DataError(f"no WAV files in {directory}")
    pool = []
    for path in paths:
        w = read_wav(path)
        if w.sample_rate != sample_rate:
            raise DataError(f"{path}: sample rate {w.sample_rate} != {sample_rate}")
        pool.append(w)
    return tuple(pool)


def synthetic_noise_pool(sample_rate: int, n: int = 4, duration: float = 2.0, rng=None) -> tuple[Waveform, ...]:
    """White, pink-ish and brown-ish noises standing in for a noise corpus."""
    rng = np.random.default_rng(rng)
    pool = []
    length = int(duration * sample_rate)
    for i in range(n):
        x = rng.standard_normal(length)
        tilt = i % 3  # 0 white, 1 pink-ish, 2 brown-ish
        if tilt:
            spec = np.fft.rfft(x)
            f = np.arange(spec.shape[0]) + 1.0
            x = np.fft.irfft(spec / f ** (0.5 * tilt), n=length)
        pool.append(Waveform(0.5 * x / np.max(np.abs(x)), sample_rate))
    return tuple(pool)


def synthetic_rir_pool(sample_rate: int, n: int = 4, t60_range=(0.2, 0.6), rng=None) -> tuple[Waveform, ...]:
    rng = np.random.default_rng(rng)
    t60s = rng.uniform(*t60_range, size=n)
    return tuple(synthetic_rir(sample_rate, float(t), rng) for t in t60s)
