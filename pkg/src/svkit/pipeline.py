"""Glue between the stages: waveform -> speech -> features -> embedding.

A :class:`Model` bundles the pipeline config, the speaker list used for
training, head weights and (on the encoder path) frozen encoder weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from svkit.audio import Waveform, check_pipeline_rate, read_wav
from svkit.augment import AugmentPolicy, load_pool, synthetic_noise_pool, synthetic_rir_pool
from svkit.config import PipelineConfig
from svkit.encoder import check_weights, encode, init_encoder
from svkit.errors import DataError, FormatError
from svkit.formats import load_checkpoint, save_checkpoint
from svkit.frontend import FeatureSequence, compute_mfb, energy_vad, sliding_mean_normalize, speech_samples
from svkit.head import HeadConfig, check_head_weights, cosine_logits, embed_batch, init_head

log = logging.getLogger(__name__)

SEED_STREAMS = ("encoder", "head", "train", "augment_pools")
LAYER_INDEXING = "1-based; layer L = output of transformer block L after its residual additions"


def component_seeds(seed: int) -> dict[str, np.random.SeedSequence]:
    """Split one top-level seed into independent per-component streams."""
    children = np.random.SeedSequence(int(seed)).spawn(len(SEED_STREAMS))
    return dict(zip(SEED_STREAMS, children))


@dataclass(eq=False)
class Model:
    config: PipelineConfig
    speakers: list[str]
    head: dict[str, np.ndarray]
    encoder: dict[str, np.ndarray] | None = None
    extra: dict = field(default_factory=dict)

    @property
    def head_config(self) -> HeadConfig:
        return self.config.head_config(self.config.feature_dim, max(len(self.speakers), 1))


def new_model(cfg: PipelineConfig, speakers: list[str], seed: int | None = None) -> Model:
    seeds = component_seeds(cfg.train.seed if seed is None else seed)
    head_cfg = cfg.head_config(cfg.feature_dim, max(len(speakers), 1))
    encoder = None
    if cfg.audio.features == "encoder":
        encoder = init_encoder(cfg.encoder_config(), seeds["encoder"])
    return Model(cfg, list(speakers), init_head(head_cfg, seeds["head"]), encoder)


def save_model(model: Model, path) -> None:
    meta = {
        "config": model.config.to_dict(),
        "speakers": model.speakers,
        "layer_indexing": LAYER_INDEXING,
    }
    tensors = {f"head.{k}": v for k, v in model.head.items()}
    if model.encoder is not None:
        tensors.update({f"encoder.{k}": v for k, v in model.encoder.items()})
    save_checkpoint(path, meta, tensors)


def load_model(path) -> Model:
    meta, tensors = load_checkpoint(path)
    for key in ("config", "speakers"):
        if key not in meta:
            raise FormatError(f"{path}: checkpoint metadata lacks {key!r}")
    cfg = PipelineConfig.from_dict(meta["config"])
    head = {k[5:]: v for k, v in tensors.items() if k.startswith("head.")}
    encoder = {k[8:]: v for k, v in tensors.items() if k.startswith("encoder.")} or None
    model = Model(cfg, list(meta["speakers"]), head, encoder)
    check_head_weights(model.head_config, head)
    if cfg.audio.features == "encoder":
        if encoder is None:
            raise FormatError(f"{path}: encoder features configured but no encoder tensors stored")
        check_weights(cfg.encoder_config(), encoder)
    return model


def load_audio(path, cfg: PipelineConfig) -> Waveform:
    w = read_wav(path)
    check_pipeline_rate(w, cfg.audio.sample_rate)
    return w


def vad_filter(w: Waveform, cfg: PipelineConfig) -> Waveform:
    """Keep only the samples of frames the energy VAD marks as speech."""
    if not cfg.vad.enabled:
        return w
    mfb_cfg = cfg.mfb_config()
    mask = energy_vad(compute_mfb(w, mfb_cfg), cfg.vad.offset_db, mfb_cfg.log_floor)
    if not mask.any():
        log.warning("VAD found no speech; keeping the whole waveform")
    return speech_samples(w, mask, mfb_cfg)


def features(w: Waveform, cfg: PipelineConfig, encoder_weights=None) -> FeatureSequence:
    if cfg.audio.features == "mfb":
        return sliding_mean_normalize(compute_mfb(w, cfg.mfb_config()), cfg.mfb.norm_window)
    if encoder_weights is None:
        raise DataError("encoder features requested but no encoder weights available")
    return encode(w, cfg.encoder_config(), encoder_weights)


def embed_waveform(w: Waveform, model: Model) -> np.ndarray:
    """Utterance embedding: the maxout output, or scaled cosine logits if configured."""
    cfg = model.config
    feats = features(vad_filter(w, cfg), cfg, model.encoder)
    if len(feats) == 0:
        raise DataError("utterance too short to produce any feature frames")
    emb = embed_batch(feats.frames, model.head, model.head_config)[0]
    if cfg.head.logit_embeddings:
        return cosine_logits(emb, model.head["classifier.weight"], cfg.head.scale)[0]
    return emb


def augment_policy(cfg: PipelineConfig, seed) -> AugmentPolicy | None:
    """Policy from the config; pools come from directories or are synthesized."""
    a = cfg.augment
    if not a.enabled:
        return None
    sr = cfg.audio.sample_rate
    rng = np.random.default_rng(seed)
    noise = load_pool(a.noise_dir, sr) if a.noise_dir else synthetic_noise_pool(sr, a.synthetic_pool_size, rng=rng)
    rirs = (
        load_pool(a.rir_dir, sr)
        if a.rir_dir
        else synthetic_rir_pool(sr, a.synthetic_pool_size, tuple(a.synthetic_rir_t60), rng=rng)
    )
    return AugmentPolicy(
        a.p_noise, a.p_rir, a.p_freq_mask, a.p_time_mask, a.p_clip,
        tuple(a.snr_range_db), tuple(a.freq_mask_width_range), tuple(a.time_mask_frac_range),
        tuple(a.clip_lower_range), tuple(a.clip_upper_range), noise, rirs,
    )


def read_manifest(path) -> list[tuple[str, str, str]]:
    """``utt_id<TAB>path<TAB>speaker_label`` rows; relative paths resolve against the manifest."""
    base = Path(path).parent
    rows = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(parts):
                raise DataError(f"{path}:{lineno}: expected utt_id<TAB>path<TAB>speaker_label")
            utt, wav, spk = parts
            if utt in seen:
                raise DataError(f"{path}:{lineno}: duplicate utterance id {utt!r}")
            seen.add(utt)
            p = Path(wav)
            rows.append((utt, str(p if p.is_absolute() else base / p), spk))
    if not rows:
        raise DataError(f"{path}: empty manifest")
    return rows
