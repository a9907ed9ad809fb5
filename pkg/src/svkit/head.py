"""Embedding head: TDNN x2, statistics pooling, maxout, AAM-Softmax classifier.

Both TDNN layers have context 1, so they act frame by frame. Forward and
backward passes are written out by hand and work on batches shaped
``(B, T, input_dim)``; all frames in a batch share one length.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp

from svkit.errors import ConfigError, DataError
from svkit.frontend import FeatureSequence

COS_CLAMP = 1e-7


@dataclass(frozen=True)
class HeadConfig:
    input_dim: int
    n_classes: int
    tdnn_dim: int = 2048
    embed_dim: int = 512
    maxout_k: int = 2
    margin: float = 0.35
    scale: float = 32.0
    pool_eps: float = 1e-5

    def __post_init__(self):
        for name in ("input_dim", "n_classes", "tdnn_dim", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"head {name} must be >= 1")
        if self.maxout_k < 2:
            raise ConfigError("maxout_k must be >= 2")
        if not 0 <= self.margin < np.pi / 2:
            raise ConfigError(f"margin must be in [0, pi/2), got {self.margin}")
        if self.scale <= 0 or self.pool_eps <= 0:
            raise ConfigError("scale and pool_eps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class SpeakerEmbedding:
    utt_id: str
    vector: np.ndarray


def head_param_shapes(cfg: HeadConfig) -> dict[str, tuple[int, ...]]:
    h, e, k = cfg.tdnn_dim, cfg.embed_dim, cfg.maxout_k
    return {
        "tdnn1.weight": (cfg.input_dim, h),
        "tdnn1.bias": (h,),
        "tdnn2.weight": (h, h),
        "tdnn2.bias": (h,),
        "maxout.weight": (k, 2 * h, e),
        "maxout.bias": (k, e),
        "classifier.weight": (cfg.n_classes, e),
    }


def init_head(cfg: HeadConfig, seed) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in head_param_shapes(cfg).items():
        if name.endswith("bias"):
            weights[name] = np.zeros(shape)
        else:
            fan_in = shape[-2]
            weights[name] = rng.standard_normal(shape) / np.sqrt(fan_in)
    return weights


def check_head_weights(cfg: HeadConfig, weights: dict) -> None:
    for name, shape in head_param_shapes(cfg).items():
        if name not in weights:
            raise ConfigError(f"head weights missing {name}")
        if weights[name].shape != shape:
            raise ConfigError(f"head weight {name} has shape {weights[name].shape}, expected {shape}")


def stats_pool(seq, eps: float = 1e-5) -> np.ndarray:
    """Mean and sqrt(population variance + eps) over the time axis, concatenated.

    Accepts a :class:`FeatureSequence`, a ``(T, F)`` array or a ``(B, T, F)`` batch.
    Frames are sorted per dimension first, so reordering them leaves the
    result unchanged bit for bit.
    """
    x = seq.frames if isinstance(seq, FeatureSequence) else np.asarray(seq, dtype=np.float64)
    if x.shape[-2] == 0:
        raise DataError("cannot pool an empty sequence")
    x = np.sort(x, axis=-2)
    mu = x.mean(axis=-2)
    sigma = np.sqrt(x.var(axis=-2) + eps)
    return np.concatenate([mu, sigma], axis=-1)


def _as_batch(x) -> np.ndarray:
    x = x.frames if isinstance(x, FeatureSequence) else np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 2 else x


def embed_batch(X: np.ndarray, w: dict, cfg: HeadConfig, keep_cache: bool = False):
    """Embeddings for a batch ``(B, T, D)``; optionally the cache for backward."""
    X = _as_batch(X)
    if X.shape[-1] != cfg.input_dim:
        raise DataError(f"feature dim {X.shape[-1]} does not match head input_dim {cfg.input_dim}")
    if X.shape[1] == 0:
        raise DataError("cannot embed an empty sequence")
    h1 = X @ w["tdnn1.weight"] + w["tdnn1.bias"]
    a1 = np.maximum(h1, 0.0)
    h2 = a1 @ w["tdnn2.weight"] + w["tdnn2.bias"]
    pooled = stats_pool(h2, cfg.pool_eps)
    half = pooled.shape[-1] // 2
    mu, sigma = pooled[:, :half], pooled[:, half:]
    z = np.einsum("bp,kpe->bke", pooled, w["maxout.weight"]) + w["maxout.bias"]
    winner = z.argmax(axis=1)
    emb = np.take_along_axis(z, winner[:, None, :], axis=1)[:, 0, :]
    if not keep_cache:
        return emb
    return emb, dict(X=X, h1=h1, a1=a1, h2=h2, mu=mu, sigma=sigma, pooled=pooled, winner=winner)


def head_forward(seq: FeatureSequence, w: dict, cfg: HeadConfig, utt_id: str = "") -> SpeakerEmbedding:
    return SpeakerEmbedding(utt_id, embed_batch(seq, w, cfg)[0])


def cosine_logits(emb: np.ndarray, classifier: np.ndarray, scale: float) -> np.ndarray:
    """``scale * cos`` between embeddings and classifier rows ("logit embeddings")."""
    emb = np.atleast_2d(emb)
    n = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    wn = classifier / np.linalg.norm(classifier, axis=1, keepdims=True)
    return scale * (n @ wn.T)


@dataclass(frozen=True, eq=False)
class AamResult:
    loss: float
    logits: np.ndarray
    grad_embedding: np.ndarray
    grad_classifier: np.ndarray


def aam_batch(emb: np.ndarray, labels, classifier: np.ndarray, m: float, s: float) -> AamResult:
    """Mean AAM-Softmax cross-entropy over a batch with analytic gradients."""
    emb = np.atleast_2d(np.asarray(emb, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    B = emb.shape[0]
    C = classifier.shape[0]
    if labels.shape != (B,):
        raise DataError("one label per embedding is required")
    if np.any(labels < 0) or np.any(labels >= C):
        raise DataError(f"label outside [0, {C})")
    e_norm = np.linalg.norm(emb, axis=1, keepdims=True)
    w_norm = np.linalg.norm(classifier, axis=1, keepdims=True)
    if np.any(e_norm == 0):
        raise DataError("zero-norm embedding")
    if np.any(w_norm == 0):
        raise DataError("zero-norm classifier row")
    n = emb / e_norm
    wn = classifier / w_norm
    raw = n @ wn.T
    lo, hi = -1.0 + COS_CLAMP, 1.0 - COS_CLAMP
    cos = np.clip(raw, lo, hi)
    inside = (raw >= lo) & (raw <= hi)

    rows = np.arange(B)
    ct = cos[rows, labels]
    sin_t = np.sqrt(1.0 - ct * ct)
    cos_m, sin_m = np.cos(m), np.sin(m)
    normal = ct > np.cos(np.pi - m)
    phi = np.where(normal, ct * cos_m - sin_t * sin_m, ct - m * sin_m)
    dphi = np.where(normal, cos_m + ct * sin_m / sin_t, 1.0)

    logits = s * cos
    logits[rows, labels] = s * phi
    lse = logsumexp(logits, axis=1)
    loss = float(np.mean(lse - logits[rows, labels]))

    dlogits = np.exp(logits - lse[:, None])
    dlogits[rows, labels] -= 1.0
    dlogits /= B
    dcos = s * dlogits
    dcos[rows, labels] *= dphi
    dcos *= inside

    dn = dcos @ wn
    dwn = dcos.T @ n
    grad_emb = (dn - np.sum(dn * n, axis=1, keepdims=True) * n) / e_norm
    grad_w = (dwn - np.sum(dwn * wn, axis=1, keepdims=True) * wn) / w_norm
    return AamResult(loss, logits, grad_emb, grad_w)


def aam_softmax_loss(embedding, label: int, classifier: np.ndarray, m: float = 0.35, s: float = 32.0) -> AamResult:
    """Single-example AAM-Softmax loss, logits and gradients."""
    res = aam_batch(np.asarray(embedding, dtype=np.float64)[None], [label], classifier, m, s)
    return AamResult(res.loss, res.logits[0], res.grad_embedding[0], res.grad_classifier)


def loss_and_grads(X, labels, w: dict, cfg: HeadConfig) -> tuple[float, dict[str, np.ndarray]]:
    """Batch-mean AAM loss and gradients for every head tensor plus ``"input"``."""
    emb, c = embed_batch(X, w, cfg, keep_cache=True)
    res = aam_batch(emb, labels, w["classifier.weight"], cfg.margin, cfg.scale)
    X, h2 = c["X"], c["h2"]
    B, T, _ = X.shape

    dz = np.zeros((B, cfg.maxout_k, cfg.embed_dim))
    np.put_along_axis(dz, c["winner"][:, None, :], res.grad_embedding[:, None, :], axis=1)
    grads = {
        "classifier.weight": res.grad_classifier,
        "maxout.weight": np.einsum("bp,bke->kpe", c["pooled"], dz),
        "maxout.bias": dz.sum(axis=0),
    }
    dpooled = np.einsum("bke,kpe->bp", dz, w["maxout.weight"])
    H = cfg.tdnn_dim
    dmu, dsigma = dpooled[:, :H], dpooled[:, H:]
    dh2 = (dmu[:, None, :] + dsigma[:, None, :] * (h2 - c["mu"][:, None, :]) / c["sigma"][:, None, :]) / T

    a1 = c["a1"]
    grads["tdnn2.weight"] = a1.reshape(B * T, H).T @ dh2.reshape(B * T, H)
    grads["tdnn2.bias"] = dh2.sum(axis=(0, 1))
    dh1 = (dh2 @ w["tdnn2.weight"].T) * (c["h1"] > 0)
    grads["tdnn1.weight"] = X.reshape(B * T, -1).T @ dh1.reshape(B * T, H)
    grads["tdnn1.bias"] = dh1.sum(axis=(0, 1))
    grads["input"] = dh1 @ w["tdnn1.weight"].T
    return res.loss, grads


def batch_loss(X, labels, w: dict, cfg: HeadConfig) -> float:
    emb = embed_batch(X, w, cfg)
    return aam_batch(emb, labels, w["classifier.weight"], cfg.margin, cfg.scale).loss
