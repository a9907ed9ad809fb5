"""Synthetic speaker corpus for end-to-end checks without real recordings.

Each speaker owns a pitch range and a small inventory of formant patterns
("vowels") with preferred usage frequencies. Utterances string together
voiced segments and pauses, with per-utterance pitch drift, formant jitter,
channel tilt and gain, so identity has to be learned from spectral detail
rather than read off the long-term average spectrum.

Run ``python -m svkit.synthetic OUT_DIR`` to write WAVs, manifests and trials.
"""

from __future__ import annotations

import argparse
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from svkit.audio import Waveform, write_wav


@dataclass(frozen=True)
class SpeakerProfile:
    name: str
    f0: float
    formants: np.ndarray  # (n_vowels, 3) centre frequencies in Hz
    bandwidths: np.ndarray  # (n_vowels, 3)
    vowel_probs: np.ndarray
    breathiness: float


@dataclass(frozen=True)
class SyntheticUtterance:
    utt_id: str
    speaker: str
    waveform: Waveform


def make_speaker(name: str, rng: np.random.Generator, n_vowels: int = 4) -> SpeakerProfile:
    f1 = rng.uniform(300, 900, n_vowels)
    f2 = rng.uniform(950, 2400, n_vowels)
    f3 = rng.uniform(2450, 3400, n_vowels)
    return SpeakerProfile(
        name=name,
        f0=float(rng.uniform(90, 260)),
        formants=np.stack([f1, f2, f3], axis=1),
        bandwidths=rng.uniform(60, 160, (n_vowels, 3)),
        vowel_probs=rng.dirichlet(np.full(n_vowels, 2.0)),
        breathiness=float(rng.uniform(0.05, 0.4)),
    )


def _envelope(freqs, formants, bandwidths) -> np.ndarray:
    env = np.full_like(freqs, 0.01)
    for i, (fc, bw) in enumerate(zip(formants, bandwidths)):
        env += (0.8**i) * np.exp(-0.5 * ((freqs - fc) / bw) ** 2)
    return env


def _segment(profile, vowel, f0, jitter, n, sr, rng) -> np.ndarray:
    t = np.arange(n) / sr
    phase = 2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi)
    pulses = np.sign(np.sin(phase)) * 0.5 + np.sin(phase)
    excitation = pulses + profile.breathiness * rng.standard_normal(n)
    spec = np.fft.rfft(excitation)
    freqs = np.fft.rfftfreq(n, 1 / sr)
    formants = profile.formants[vowel] * jitter
    seg = np.fft.irfft(spec * _envelope(freqs, formants, profile.bandwidths[vowel]), n=n)
    fade = min(n // 2, int(0.01 * sr))
    if fade:
        ramp = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, fade))
        seg[:fade] *= ramp
        seg[-fade:] *= ramp[::-1]
    return seg


def make_utterance(profile: SpeakerProfile, duration: float, sample_rate: int, rng) -> Waveform:
    n_total = int(round(duration * sample_rate))
    f0 = profile.f0 * rng.uniform(0.93, 1.07)
    jitter = rng.uniform(0.96, 1.04, 3)
    out = np.zeros(n_total)
    pos = 0
    while pos < n_total:
        n = min(int(rng.uniform(0.08, 0.3) * sample_rate), n_total - pos)
        if rng.random() > 0.15:
            vowel = rng.choice(len(profile.vowel_probs), p=profile.vowel_probs)
            seg = _segment(profile, vowel, f0 * rng.uniform(0.97, 1.03), jitter, n, sample_rate, rng)
            out[pos : pos + n] = seg / (np.max(np.abs(seg)) + 1e-12) * rng.uniform(0.5, 1.0)
        pos += n
    # channel: random first-order tilt plus a faint noise floor
    tilt = rng.uniform(-0.6, 0.6)
    out = np.append(out[0], out[1:] - tilt * out[:-1])
    out += 10 ** (-55 / 20) * rng.standard_normal(n_total)
    out *= rng.uniform(0.3, 0.8) / (np.max(np.abs(out)) + 1e-12)
    return Waveform(out, sample_rate)


def make_corpus(
    n_speakers: int = 20,
    n_utts: int = 30,
    duration: float = 6.0,
    sample_rate: int = 8000,
    seed: int = 0,
) -> list[SyntheticUtterance]:
    rng = np.random.default_rng(seed)
    corpus = []
    for s in range(n_speakers):
        profile = make_speaker(f"spk{s:03d}", rng)
        for u in range(n_utts):
            w = make_utterance(profile, duration, sample_rate, rng)
            corpus.append(SyntheticUtterance(f"{profile.name}-utt{u:03d}", profile.name, w))
    return corpus


def split_corpus(corpus: list[SyntheticUtterance], n_train: int):
    """First ``n_train`` utterances of each speaker train; the rest are held out."""
    seen: dict[str, int] = {}
    train, held_out = [], []
    for item in corpus:
        k = seen.get(item.speaker, 0)
        seen[item.speaker] = k + 1
        (train if k < n_train else held_out).append(item)
    return train, held_out


def make_trials(items: list[SyntheticUtterance], n_nontarget: int | None = None, seed: int = 0):
    """All same-speaker pairs plus an equal number (by default) of random cross-speaker pairs."""
    rng = np.random.default_rng(seed)
    target = [
        (a.utt_id, b.utt_id, "target")
        for a, b in itertools.combinations(items, 2)
        if a.speaker == b.speaker
    ]
    n_nontarget = len(target) if n_nontarget is None else n_nontarget
    nontarget = set()
    ids = [i.utt_id for i in items]
    spk = {i.utt_id: i.speaker for i in items}
    while len(nontarget) < n_nontarget:
        a, b = rng.choice(len(ids), 2, replace=False)
        if spk[ids[a]] != spk[ids[b]]:
            nontarget.add((ids[min(a, b)], ids[max(a, b)], "nontarget"))
    return target + sorted(nontarget)


def write_corpus(out_dir, n_speakers=20, n_utts=30, n_train=5, duration=6.0, sample_rate=8000, seed=0) -> dict:
    """Write WAVs, ``train.tsv``/``eval.tsv`` manifests and ``trials.tsv``."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    corpus = make_corpus(n_speakers, n_utts, duration, sample_rate, seed)
    train, held_out = split_corpus(corpus, n_train)
    for name, items in (("train.tsv", train), ("eval.tsv", held_out)):
        with open(out / name, "w", encoding="utf-8") as fh:
            for item in items:
                write_wav(item.waveform, out / "wav" / f"{item.utt_id}.wav")
                fh.write(f"{item.utt_id}\twav/{item.utt_id}.wav\t{item.speaker}\n")
    with open(out / "trials.tsv", "w", encoding="utf-8") as fh:
        for enr, test, label in make_trials(held_out, seed=seed):
            fh.write(f"{enr}\t{test}\t{label}\n")
    return {"train": str(out / "train.tsv"), "eval": str(out / "eval.tsv"), "trials": str(out / "trials.tsv")}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="write a synthetic speaker corpus")
    ap.add_argument("out_dir")
    ap.add_argument("--speakers", type=int, default=20)
    ap.add_argument("--utts", type=int, default=30)
    ap.add_argument("--train-utts", type=int, default=5)
    ap.add_argument("--duration", type=float, default=6.0)
    ap.add_argument("--sample-rate", type=int, default=8000, choices=(8000, 16000))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    write_corpus(args.out_dir, args.speakers, args.utts, args.train_utts, args.duration, args.sample_rate, args.seed)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
