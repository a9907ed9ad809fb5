"""Wav2vec-style encoder: strided conv feature extractor + pre-norm transformer.

Inference only. Output is taken after transformer block ``truncate_layer``
(1-based, post-residual), so layer-selection experiments can stop the
forward pass early.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from importlib import resources

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from svkit.audio import Waveform
from svkit.errors import ConfigError, DataError
from svkit.frontend import FeatureSequence

DEFAULT_CONV = ((64, 10, 5), (64, 3, 2), (64, 3, 2), (64, 3, 2))


@dataclass(frozen=True)
class EncoderConfig:
    conv_layers: tuple = DEFAULT_CONV
    d_model: int = 64
    n_layers: int = 6
    n_heads: int = 4
    ffn_dim: int = 256
    truncate_layer: int = 3
    positional_conv_kernel: int = 16
    positional_conv_groups: int = 4
    layernorm_eps: float = 1e-5
    sample_rate: int = 16000

    def __post_init__(self):
        object.__setattr__(self, "conv_layers", tuple(tuple(int(v) for v in layer) for layer in self.conv_layers))
        self.validate()

    def validate(self) -> None:
        if not self.conv_layers:
            raise ConfigError("encoder needs at least one conv layer")
        for layer in self.conv_layers:
            if len(layer) != 3 or min(layer) < 1:
                raise ConfigError(f"conv layer must be (out_channels, kernel, stride) >= 1, got {layer}")
        for name in ("d_model", "n_layers", "n_heads", "ffn_dim", "positional_conv_kernel", "positional_conv_groups"):
            if getattr(self, name) < 1:
                raise ConfigError(f"encoder {name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.d_model % self.positional_conv_groups:
            raise ConfigError("d_model must be divisible by positional_conv_groups")
        if not 1 <= self.truncate_layer <= self.n_layers:
            raise ConfigError(f"truncate_layer must be in [1, {self.n_layers}], got {self.truncate_layer}")
        if self.layernorm_eps <= 0:
            raise ConfigError("layernorm_eps must be positive")

    @property
    def total_stride(self) -> int:
        return int(np.prod([s for _, _, s in self.conv_layers]))

    @property
    def receptive_field(self) -> int:
        rf = 1
        for _, k, s in reversed(self.conv_layers):
            rf = (rf - 1) * s + k
        return rf

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_layers"] = [list(layer) for layer in self.conv_layers]
        return d


def load_preset(name: str) -> EncoderConfig:
    """Full-size shape presets (``xlsr_53``, ``xls_r_1b``); no weights ship."""
    try:
        text = resources.files("svkit.presets").joinpath(f"{name}.json").read_text()
    except FileNotFoundError:
        raise ConfigError(f"unknown encoder preset {name!r}") from None
    return EncoderConfig(**json.loads(text))


def output_length(n_samples: int, cfg: EncoderConfig) -> int:
    n = n_samples
    for _, k, s in cfg.conv_layers:
        if n < k:
            return 0
        n = (n - k) // s + 1
    return n


def min_input_samples(cfg: EncoderConfig) -> int:
    return cfg.receptive_field


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 1
    for i, (c_out, k, _) in enumerate(cfg.conv_layers):
        shapes[f"conv.{i}.weight"] = (c_out, c_in, k)
        shapes[f"conv.{i}.bias"] = (c_out,)
        shapes[f"conv.{i}.ln.gain"] = (c_out,)
        shapes[f"conv.{i}.ln.bias"] = (c_out,)
        c_in = c_out
    d = cfg.d_model
    shapes["proj.ln.gain"] = (c_in,)
    shapes["proj.ln.bias"] = (c_in,)
    shapes["proj.weight"] = (c_in, d)
    shapes["proj.bias"] = (d,)
    shapes["pos_conv.weight"] = (d, d // cfg.positional_conv_groups, cfg.positional_conv_kernel)
    shapes["pos_conv.bias"] = (d,)
    for layer in range(cfg.n_layers):
        p = f"layers.{layer}."
        for ln in ("ln1", "ln2"):
            shapes[p + ln + ".gain"] = (d,)
            shapes[p + ln + ".bias"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"attn.{proj}.weight"] = (d, d)
            shapes[p + f"attn.{proj}.bias"] = (d,)
        shapes[p + "ffn.w1"] = (d, cfg.ffn_dim)
        shapes[p + "ffn.b1"] = (cfg.ffn_dim,)
        shapes[p + "ffn.w2"] = (cfg.ffn_dim, d)
        shapes[p + "ffn.b2"] = (d,)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.startswith("conv.") or name.startswith("pos_conv."):
        return int(np.prod(shape[1:]))
    return shape[0]


def init_encoder(cfg: EncoderConfig, seed) -> dict[str, np.ndarray]:
    """Random weights: N(0, 1/fan_in) matrices, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gain"):
            weights[name] = np.ones(shape)
        elif name.endswith("bias") or name.endswith(".b1") or name.endswith(".b2"):
            weights[name] = np.zeros(shape)
        else:
            weights[name] = rng.standard_normal(shape) / np.sqrt(_fan_in(name, shape))
    return weights


def check_weights(cfg: EncoderConfig, weights: dict[str, np.ndarray]) -> None:
    expected = param_shapes(cfg)
    missing = sorted(set(expected) - set(weights))
    if missing:
        raise ConfigError(f"encoder weights missing {missing[:3]}{'...' if len(missing) > 3 else ''}")
    for name, shape in expected.items():
        if weights[name].shape != shape:
            raise ConfigError(f"encoder weight {name} has shape {weights[name].shape}, expected {shape}")


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def conv1d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int) -> np.ndarray:
    """Valid strided convolution of ``x`` (T, C_in) with ``weight`` (C_out, C_in, k)."""
    c_out, c_in, k = weight.shape
    windows = sliding_window_view(x, k, axis=0)[::stride]  # (T', C_in, k)
    return windows.reshape(windows.shape[0], c_in * k) @ weight.reshape(c_out, c_in * k).T + bias


def positional_conv(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, groups: int) -> np.ndarray:
    """Grouped 'same' convolution; even kernels drop the trailing frame."""
    T, d = x.shape
    k = weight.shape[2]
    padded = np.pad(x, ((k // 2, k // 2), (0, 0)))
    step = d // groups
    out = np.empty((padded.shape[0] - k + 1, d))
    for g in range(groups):
        sl = slice(g * step, (g + 1) * step)
        out[:, sl] = conv1d(padded[:, sl], weight[sl], bias[sl], 1)
    return out[:T]


def attention(x: np.ndarray, weights: dict, prefix: str, n_heads: int, return_probs: bool = False):
    """Unmasked multi-head self-attention over (T, d) inputs."""
    T, d = x.shape
    dh = d // n_heads

    def heads(name):
        y = x @ weights[f"{prefix}{name}.weight"] + weights[f"{prefix}{name}.bias"]
        return y.reshape(T, n_heads, dh).transpose(1, 0, 2)

    q, k, v = heads("q"), heads("k"), heads("v")
    probs = softmax((q * (1.0 / np.sqrt(dh))) @ k.transpose(0, 2, 1), axis=-1)
    ctx = (probs @ v).transpose(1, 0, 2).reshape(T, d)
    out = ctx @ weights[f"{prefix}o.weight"] + weights[f"{prefix}o.bias"]
    return (out, probs) if return_probs else out


def transformer_block(x: np.ndarray, weights: dict, layer: int, cfg: EncoderConfig) -> np.ndarray:
    p = f"layers.{layer}."
    eps = cfg.layernorm_eps
    h = layer_norm(x, weights[p + "ln1.gain"], weights[p + "ln1.bias"], eps)
    x = x + attention(h, weights, p + "attn.", cfg.n_heads)
    h = layer_norm(x, weights[p + "ln2.gain"], weights[p + "ln2.bias"], eps)
    h = gelu(h @ weights[p + "ffn.w1"] + weights[p + "ffn.b1"])
    return x + (h @ weights[p + "ffn.w2"] + weights[p + "ffn.b2"])


def extract_latents(w: Waveform, cfg: EncoderConfig, weights: dict) -> np.ndarray:
    """Conv feature extractor, projection and positional embedding; (T', d_model)."""
    if w.sample_rate != cfg.sample_rate:
        raise DataError(f"encoder expects {cfg.sample_rate} Hz audio, got {w.sample_rate} Hz")
    if output_length(len(w), cfg) < 1:
        raise DataError(
            f"input of {len(w)} samples is too short for the encoder; need at least {min_input_samples(cfg)} samples"
        )
    eps = cfg.layernorm_eps
    x = w.samples[:, None]
    for i, (_, _, stride) in enumerate(cfg.conv_layers):
        x = conv1d(x, weights[f"conv.{i}.weight"], weights[f"conv.{i}.bias"], stride)
        x = gelu(layer_norm(x, weights[f"conv.{i}.ln.gain"], weights[f"conv.{i}.ln.bias"], eps))
    x = layer_norm(x, weights["proj.ln.gain"], weights["proj.ln.bias"], eps)
    x = x @ weights["proj.weight"] + weights["proj.bias"]
    pos = positional_conv(x, weights["pos_conv.weight"], weights["pos_conv.bias"], cfg.positional_conv_groups)
    return x + gelu(pos)


def encode_layers(w: Waveform, cfg: EncoderConfig, weights: dict, upto: int | None = None) -> list[np.ndarray]:
    """Hidden states after blocks 1..upto (default: all layers)."""
    upto = cfg.n_layers if upto is None else upto
    if not 1 <= upto <= cfg.n_layers:
        raise ConfigError(f"layer {upto} outside [1, {cfg.n_layers}]")
    x = extract_latents(w, cfg, weights)
    outputs = []
    for layer in range(upto):
        x = transformer_block(x, weights, layer, cfg)
        outputs.append(x)
    return outputs


def encode(w: Waveform, cfg: EncoderConfig, weights: dict) -> FeatureSequence:
    """Hidden states of transformer layer ``cfg.truncate_layer``."""
    hidden = encode_layers(w, cfg, weights, cfg.truncate_layer)[-1]
    return FeatureSequence(
        hidden,
        frame_shift=cfg.total_stride / cfg.sample_rate,
        frame_length=cfg.receptive_field / cfg.sample_rate,
        feature_kind="hidden-state",
    )


def with_layer(cfg: EncoderConfig, layer: int) -> EncoderConfig:
    return replace(cfg, truncate_layer=layer)
