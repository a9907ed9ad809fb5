import numpy as np
import pytest

from conftest import sine
from svkit.audio import Waveform
from svkit.augment import (
    AUGMENT_ORDER,
    AugmentPolicy,
    apply_policy,
    clip_distort,
    convolve_rir,
    freq_mask,
    mix_noise_at_snr,
    snr_gain,
    synthetic_noise_pool,
    synthetic_rir,
    synthetic_rir_pool,
    time_mask,
)
from svkit.errors import ConfigError, DataError

SR = 8000


def rms(x):
    return np.sqrt(np.mean(np.square(x)))


def test_snr_gain_closed_form(rng):
    w = Waveform(sine(100, 1.0), SR)  # 100 Hz divides 1 s exactly, power 0.5
    noise = rng.standard_normal(SR)
    noise /= rms(noise)
    g = snr_gain(w, Waveform(noise, SR), 10.0)
    assert g == pytest.approx(np.sqrt(0.05), rel=1e-9)
    assert np.sqrt(0.05) == pytest.approx(0.223607, abs=1e-6)


def test_snr_zero_db_equal_power(rng):
    a = rng.standard_normal(4000)
    b = rng.standard_normal(4000)
    b *= rms(a) / rms(b)
    assert snr_gain(Waveform(a, SR), Waveform(b, SR), 0.0) == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("snr", [0.0, 5.0, 12.5, 20.0])
def test_measured_snr_matches_request(rng, snr):
    w = Waveform(0.1 * sine(300, 1.0) + 0.02 * rng.standard_normal(SR), SR)
    noise = Waveform(0.2 * rng.standard_normal(3000), SR)  # looped to length
    out = mix_noise_at_snr(w, noise, snr)
    added = out.samples - w.samples
    assert np.max(np.abs(out.samples)) < 1.0  # no clamping in this regime
    measured = 10 * np.log10(np.mean(w.samples**2) / np.mean(added**2))
    assert abs(measured - snr) < 0.01
    looped = np.resize(noise.samples, SR)
    np.testing.assert_allclose(added, snr_gain(w, noise, snr) * looped, atol=1e-12)


def test_mix_clamps_output(rng):
    w = Waveform(sine(100, 0.5), SR)
    out = mix_noise_at_snr(w, Waveform(rng.standard_normal(SR), SR), 0.0)
    assert np.max(np.abs(out.samples)) <= 1.0


def test_mix_zero_power_errors(rng):
    with pytest.raises(DataError):
        mix_noise_at_snr(Waveform(np.zeros(100), SR), Waveform(np.ones(100), SR), 5)
    with pytest.raises(DataError):
        mix_noise_at_snr(Waveform(np.ones(100), SR), Waveform(np.zeros(100), SR), 5)


def test_rir_identity_and_shift(rng):
    x = rng.uniform(-0.5, 0.5, 1000)
    w = Waveform(x, SR)
    np.testing.assert_allclose(convolve_rir(w, Waveform([1.0], SR)).samples, x, atol=1e-12)
    d = 7
    delayed = np.zeros(d + 1)
    delayed[d] = 1.0
    out = convolve_rir(w, Waveform(delayed, SR)).samples
    shifted = np.concatenate([np.zeros(d), x[:-d]])
    # peak-normalization rescales by peak(x) / peak(shifted)
    np.testing.assert_allclose(out, shifted * np.max(np.abs(x)) / np.max(np.abs(shifted)), atol=1e-12)


def test_rir_decay_matches_direct_convolution(rng):
    x = rng.standard_normal(1000) * 0.3
    rir = synthetic_rir(SR, 0.05, rng)
    out = convolve_rir(Waveform(x, SR), rir).samples
    ref = np.convolve(x, rir.samples)[:1000]
    ref *= np.max(np.abs(x)) / np.max(np.abs(ref))
    assert out.shape == (1000,)
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_rir_empty_errors():
    with pytest.raises(DataError):
        convolve_rir(Waveform(np.ones(10), SR), Waveform(np.zeros(0), SR))


def test_synthetic_rir_decays():
    h = synthetic_rir(SR, 0.3, 0).samples
    assert h[0] == 1.0
    assert len(h) == round(0.3 * SR)
    first, last = h[1:400], h[-400:]
    assert rms(last) < rms(first) * 0.01


def test_freq_mask_off_band_preserves_tone():
    x = sine(1000, 1.0, amp=0.5)
    out = freq_mask(Waveform(x, SR), 2500, 400).samples
    assert len(out) == len(x)
    assert abs(rms(out) / rms(x) - 1) < 0.05


def test_freq_mask_on_band_removes_tone():
    x = sine(1000, 1.0, amp=0.5)
    out = freq_mask(Waveform(x, SR), 1000, 400).samples
    assert 20 * np.log10(rms(out) / rms(x)) <= -20


def test_freq_mask_width_zero_roundtrip(rng):
    x = rng.standard_normal(4321) * 0.2
    out = freq_mask(Waveform(x, SR), 1000, 0).samples
    assert rms(out - x) <= 1e-6


def test_freq_mask_outside_nyquist_errors():
    w = Waveform(np.ones(1000), SR)
    with pytest.raises(DataError):
        freq_mask(w, 3900, 400)
    with pytest.raises(DataError):
        freq_mask(w, 100, 400)


def test_time_mask_cases():
    x = sine(440, 3.0)
    w = Waveform(x, SR)
    np.testing.assert_array_equal(time_mask(w, 1.0, 0.0).samples, x)
    np.testing.assert_array_equal(time_mask(w, 0.0, 3.0).samples, 0.0)
    out = time_mask(w, 1.0, 1.0).samples
    np.testing.assert_array_equal(out[SR : 2 * SR], 0.0)
    np.testing.assert_array_equal(out[:SR], x[:SR])
    np.testing.assert_array_equal(out[2 * SR :], x[2 * SR :])
    with pytest.raises(DataError):
        time_mask(w, 2.5, 1.0)


def test_clip_identity_and_flattening():
    x = sine(50, 1.0, amp=0.8)
    w = Waveform(x, SR)
    np.testing.assert_allclose(clip_distort(w, 0, 100).samples, x, atol=1e-15)
    out = clip_distort(w, 40, 60).samples
    ref = np.clip(x, np.percentile(x, 40), np.percentile(x, 60))
    ref *= 0.8 / np.max(np.abs(ref))
    np.testing.assert_allclose(out, ref, atol=1e-12)
    assert abs(np.max(np.abs(out)) - np.max(np.abs(x))) <= 1e-9
    # square-like: most samples sit at the rails
    assert np.mean(np.abs(np.abs(out) - 0.8) < 1e-9) > 0.5


def test_clip_zero_input_unchanged():
    w = Waveform(np.zeros(100), SR)
    assert clip_distort(w, 10, 90) is w


def pools():
    return synthetic_noise_pool(SR, 2, rng=0), synthetic_rir_pool(SR, 2, rng=1)


def test_policy_all_zero_is_identity(rng):
    x = rng.standard_normal(SR) * 0.1
    w = Waveform(x, SR)
    out, record = apply_policy(w, AugmentPolicy(0, 0, 0, 0, 0), 5)
    np.testing.assert_array_equal(out.samples, x)
    assert record == []


def test_policy_all_one_applies_in_order(rng):
    noise, rirs = pools()
    w = Waveform(rng.standard_normal(SR) * 0.1, SR)
    out, record = apply_policy(w, AugmentPolicy(1, 1, 1, 1, 1, noise_pool=noise, rir_pool=rirs), 9)
    assert [r.kind for r in record] == list(AUGMENT_ORDER)
    assert len(out) == len(w) and out.sample_rate == SR


def test_policy_deterministic(rng):
    noise, rirs = pools()
    policy = AugmentPolicy(noise_pool=noise, rir_pool=rirs)
    w = Waveform(rng.standard_normal(SR) * 0.1, SR)
    a, ra = apply_policy(w, policy, 77)
    b, rb = apply_policy(w, policy, 77)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert [r.to_dict() for r in ra] == [r.to_dict() for r in rb]


def test_policy_frequencies():
    noise, rirs = pools()
    policy = AugmentPolicy(noise_pool=noise, rir_pool=rirs)
    probs = np.asarray(policy.probabilities)
    counts = np.zeros(5)
    for seed in range(10_000):
        rng = np.random.default_rng(seed)
        counts += rng.random(5) < probs
    freqs = counts / 10_000
    assert np.all((freqs >= 0.235) & (freqs <= 0.265)), freqs


def test_policy_record_frequencies_on_audio():
    noise, rirs = pools()
    policy = AugmentPolicy(noise_pool=noise, rir_pool=rirs)
    w = Waveform(np.random.default_rng(0).standard_normal(400) * 0.1, SR)
    counts = dict.fromkeys(AUGMENT_ORDER, 0)
    for seed in range(2000):
        _, record = apply_policy(w, policy, seed)
        for r in record:
            counts[r.kind] += 1
    for kind, c in counts.items():
        assert 0.2 < c / 2000 < 0.3, (kind, c)


def test_policy_validation():
    with pytest.raises(ConfigError):
        AugmentPolicy(p_noise=1.5)
    with pytest.raises(ConfigError):
        AugmentPolicy(p_noise=0.25)  # no noise pool
    with pytest.raises(ConfigError):
        AugmentPolicy(0, 0, snr_range_db=(10, 0))
    with pytest.raises(ConfigError):
        AugmentPolicy(0, 0, freq_mask_width_range=(-1, 10))
