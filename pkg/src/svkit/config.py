"""Pipeline configuration: one JSON document, every field defaulted.

Unknown keys are rejected. The JSON schema is derived from the section
dataclasses, so the published schema and the loader never drift apart.
"""

from __future__ import annotations

import json
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path

import jsonschema

from svkit.encoder import DEFAULT_CONV, EncoderConfig
from svkit.errors import ConfigError
from svkit.formats import canonical_json
from svkit.frontend import MfbConfig
from svkit.head import HeadConfig


@dataclass(frozen=True)
class AudioSection:
    sample_rate: int = 8000
    features: str = "mfb"  # "mfb" or "encoder"


@dataclass(frozen=True)
class MfbSection:
    n_mels: int = 64
    frame_length: float = 0.025
    frame_shift: float = 0.010
    f_min: float = 20.0
    f_max: float = 3700.0
    log_floor: float = 1e-10
    norm_window: float = 3.0


@dataclass(frozen=True)
class VadSection:
    enabled: bool = True
    offset_db: float = 40.0


@dataclass(frozen=True)
class AugmentSection:
    enabled: bool = True
    p_noise: float = 0.25
    p_rir: float = 0.25
    p_freq_mask: float = 0.25
    p_time_mask: float = 0.25
    p_clip: float = 0.25
    snr_range_db: list = field(default_factory=lambda: [0.0, 20.0])
    freq_mask_width_range: list = field(default_factory=lambda: [50.0, 800.0])
    time_mask_frac_range: list = field(default_factory=lambda: [0.0, 0.1])
    clip_lower_range: list = field(default_factory=lambda: [0.0, 40.0])
    clip_upper_range: list = field(default_factory=lambda: [60.0, 100.0])
    noise_dir: str | None = None
    rir_dir: str | None = None
    synthetic_pool_size: int = 4
    synthetic_rir_t60: list = field(default_factory=lambda: [0.2, 0.6])


@dataclass(frozen=True)
class EncoderSection:
    conv_layers: list = field(default_factory=lambda: [list(c) for c in DEFAULT_CONV])
    d_model: int = 64
    n_layers: int = 6
    n_heads: int = 4
    ffn_dim: int = 256
    truncate_layer: int = 3
    positional_conv_kernel: int = 16
    positional_conv_groups: int = 4
    layernorm_eps: float = 1e-5


@dataclass(frozen=True)
class HeadSection:
    tdnn_dim: int = 256
    embed_dim: int = 128
    maxout_k: int = 2
    margin: float = 0.35
    scale: float = 32.0
    pool_eps: float = 1e-5
    logit_embeddings: bool = False


@dataclass(frozen=True)
class TrainSection:
    seed: int = 0
    epochs: int = 5
    batch_size: int = 8
    stage1_chunk: list = field(default_factory=lambda: [4.0, 6.0])
    stage2_chunk: list = field(default_factory=lambda: [12.0, 18.0])
    stage2_epochs: int = 0
    chunks_per_utterance: int = 4
    lr_start: float = 0.005
    lr_max: float = 0.05
    lr_final: float = 0.001
    warmup_frac: float = 0.3
    momentum: float = 0.9
    weight_decay: float = 0.0
    freeze_encoder: bool = True


@dataclass(frozen=True)
class ScoringSection:
    snorm: bool = False
    cohort_k: int = 200
    chnorm: bool = False


@dataclass(frozen=True)
class MetricsSection:
    p_targets: list = field(default_factory=lambda: [0.01, 0.05])
    c_miss: float = 1.0
    c_fa: float = 1.0


SECTIONS = {
    "audio": AudioSection,
    "mfb": MfbSection,
    "vad": VadSection,
    "augment": AugmentSection,
    "encoder": EncoderSection,
    "head": HeadSection,
    "train": TrainSection,
    "scoring": ScoringSection,
    "metrics": MetricsSection,
}

_PAIR = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_SPECIAL = {
    ("encoder", "conv_layers"): {
        "type": "array",
        "minItems": 1,
        "items": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3},
    },
    ("metrics", "p_targets"): {"type": "array", "items": {"type": "number"}, "minItems": 1},
    ("audio", "features"): {"type": "string", "enum": ["mfb", "encoder"]},
    ("audio", "sample_rate"): {"type": "integer", "enum": [8000, 16000]},
}


def _field_schema(section: str, f) -> dict:
    if (section, f.name) in _SPECIAL:
        return _SPECIAL[(section, f.name)]
    default = f.default if f.default is not MISSING else f.default_factory()
    if isinstance(default, bool):
        return {"type": "boolean"}
    if isinstance(default, int):
        return {"type": "integer"}
    if isinstance(default, float):
        return {"type": "number"}
    if isinstance(default, str):
        return {"type": "string"}
    if isinstance(default, list):
        return _PAIR
    if default is None:
        return {"type": ["string", "null"]}
    raise TypeError(f"no schema rule for {section}.{f.name}")


def config_schema() -> dict:
    props = {}
    for name, cls in SECTIONS.items():
        props[name] = {
            "type": "object",
            "additionalProperties": False,
            "properties": {f.name: _field_schema(name, f) for f in fields(cls)},
        }
    return {
        "$schema": "http://json-schema.org/draft-07/schema#",
        "title": "svkit pipeline configuration",
        "type": "object",
        "additionalProperties": False,
        "properties": props,
    }


@dataclass(frozen=True)
class PipelineConfig:
    audio: AudioSection = field(default_factory=AudioSection)
    mfb: MfbSection = field(default_factory=MfbSection)
    vad: VadSection = field(default_factory=VadSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    head: HeadSection = field(default_factory=HeadSection)
    train: TrainSection = field(default_factory=TrainSection)
    scoring: ScoringSection = field(default_factory=ScoringSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        try:
            jsonschema.validate(doc, config_schema())
        except jsonschema.ValidationError as exc:
            where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config {where}: {exc.message}") from None
        sections = {name: SECTIONS[name](**doc.get(name, {})) for name in SECTIONS}
        cfg = cls(**sections)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return canonical_json(self.to_dict())

    def override(self, section: str, **values) -> "PipelineConfig":
        return replace(self, **{section: replace(getattr(self, section), **values)})

    def validate(self) -> None:
        """Cross-field checks beyond what the schema expresses."""
        enc = self.encoder_config()
        if self.audio.features == "mfb":
            self.mfb_config().validate(self.audio.sample_rate)
        elif enc.sample_rate != self.audio.sample_rate:
            raise ConfigError("encoder features require audio.sample_rate 16000")
        if self.vad.enabled:
            self.mfb_config().validate(self.audio.sample_rate)
        self.head_config(1, 2)
        t = self.train
        if not (t.lr_start > 0 and t.lr_max > 0 and t.lr_final > 0):
            raise ConfigError("learning rates must be positive")
        if not 0 < t.warmup_frac < 1:
            raise ConfigError("train.warmup_frac must be in (0, 1)")
        for rng_name in ("stage1_chunk", "stage2_chunk"):
            lo, hi = getattr(t, rng_name)
            if not 0 < lo <= hi:
                raise ConfigError(f"train.{rng_name} must satisfy 0 < min <= max")
        if t.epochs < 1 or t.batch_size < 1 or t.stage2_epochs < 0 or t.chunks_per_utterance < 1:
            raise ConfigError("train epochs, batch_size and chunks_per_utterance must be >= 1")
        if not 0 <= t.momentum < 1 or t.weight_decay < 0:
            raise ConfigError("train.momentum must be in [0, 1) and weight_decay >= 0")
        if self.scoring.cohort_k < 1:
            raise ConfigError("scoring.cohort_k must be >= 1")
        for p in self.metrics.p_targets:
            if not 0 < p < 1:
                raise ConfigError(f"metrics.p_targets entries must be in (0, 1), got {p}")

    def mfb_config(self) -> MfbConfig:
        m = self.mfb
        return MfbConfig(m.n_mels, m.frame_length, m.frame_shift, m.f_min, m.f_max, m.log_floor)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(sample_rate=16000, **asdict(self.encoder))

    def head_config(self, input_dim: int, n_classes: int) -> HeadConfig:
        h = self.head
        return HeadConfig(input_dim, n_classes, h.tdnn_dim, h.embed_dim, h.maxout_k, h.margin, h.scale, h.pool_eps)

    @property
    def feature_dim(self) -> int:
        return self.mfb.n_mels if self.audio.features == "mfb" else self.encoder.d_model


def load_config(path) -> PipelineConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return PipelineConfig.from_dict(doc)


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(cfg.dumps(), encoding="utf-8")
