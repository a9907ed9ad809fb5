"""Head fine-tuning: chunk curriculum, online augmentation, one-cycle SGD.

The encoder (when used) is frozen; only the head is updated, with the
hand-derived gradients from :mod:`svkit.head`.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from svkit.audio import ChunkSpec, random_chunk
from svkit.augment import apply_policy
from svkit.config import PipelineConfig, TrainSection
from svkit.errors import ChunkTooShortError, ConfigError, DataError
from svkit.head import HeadConfig, batch_loss, loss_and_grads
from svkit.pipeline import (
    Model,
    augment_policy,
    component_seeds,
    features,
    load_audio,
    new_model,
    save_model,
    vad_filter,
)

log = logging.getLogger(__name__)


def one_cycle_lr(step: int, total_steps: int, cfg: TrainSection) -> float:
    """Linear warm-up to ``lr_max`` then linear decay to ``lr_final``."""
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    peak = cfg.warmup_frac * total_steps
    if step <= peak:
        return cfg.lr_start + (cfg.lr_max - cfg.lr_start) * (step / peak)
    return cfg.lr_max + (step - peak) / (total_steps - peak) * (cfg.lr_final - cfg.lr_max)


def grad_check(
    weights: dict[str, np.ndarray],
    cfg: HeadConfig,
    X: np.ndarray,
    labels,
    fd_step: float = 1e-5,
    n_coords: int = 200,
    seed=0,
    rtol: float = 1e-4,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Coordinates are sampled across every head tensor and the input features,
    at least ``n_coords`` in total. Works on copies; ``weights`` is untouched.

    The error is ``|a - n| / max(|a|, |n|, floor)``. Central differences in
    float64 carry an absolute rounding error of about ``eps * |loss| / fd_step``,
    so gradients smaller than that error divided by ``rtol`` cannot be resolved
    to ``rtol``; ``floor`` is set to that magnitude (and never below 1e-8).
    """
    if not fd_step > 0:
        raise ValueError("fd_step must be positive")
    w = {k: np.array(v, dtype=np.float64) for k, v in weights.items()}
    X = np.array(X, dtype=np.float64)
    X = X[None] if X.ndim == 2 else X
    loss, grads = loss_and_grads(X, labels, w, cfg)
    if not np.isfinite(loss):
        raise DataError("non-finite loss in gradient check")
    floor = max(1e-8, np.finfo(np.float64).eps * max(abs(loss), 1.0) / fd_step / rtol)

    rng = np.random.default_rng(seed)
    targets = {**w, "input": X}
    names = sorted(targets)
    per_tensor = max(1, math.ceil(n_coords / len(names)))
    worst = 0.0
    for name in names:
        arr = targets[name]
        flat = arr.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        if flat.size < per_tensor:
            picks = np.concatenate([picks, rng.integers(flat.size, size=per_tensor - flat.size)])
        analytic = grads[name].reshape(-1)
        for i in picks:
            old = flat[i]
            flat[i] = old + fd_step
            up = batch_loss(X, labels, w, cfg)
            flat[i] = old - fd_step
            down = batch_loss(X, labels, w, cfg)
            flat[i] = old
            numeric = (up - down) / (2 * fd_step)
            a = analytic[i]
            denom = max(abs(a), abs(numeric), floor)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


@dataclass
class TrainResult:
    model: Model
    step_log: list[dict] = field(default_factory=list)
    epoch_log: list[dict] = field(default_factory=list)


def _stages(t: TrainSection) -> list[tuple[ChunkSpec, int]]:
    stages = [(ChunkSpec(*t.stage1_chunk), t.epochs)]
    if t.stage2_epochs:
        stages.append((ChunkSpec(*t.stage2_chunk), t.stage2_epochs))
    return stages


def load_training_set(manifest, cfg: PipelineConfig):
    """Decode and VAD-filter every manifest entry once; returns speakers and items."""
    if not manifest:
        raise DataError("empty manifest")
    speakers = sorted({spk for _, _, spk in manifest})
    if len(speakers) < 2:
        raise DataError("training needs at least two speakers")
    index = {spk: i for i, spk in enumerate(speakers)}
    items = []
    for utt, path, spk in manifest:
        w = vad_filter(load_audio(path, cfg), cfg)
        items.append((utt, index[spk], w))
    return speakers, items


def train(
    manifest,
    cfg: PipelineConfig,
    log_path=None,
    checkpoint_dir=None,
    items=None,
) -> TrainResult:
    """Train a head from ``(utt_id, wav_path, speaker)`` rows.

    ``items`` may carry pre-loaded ``(utt_id, label, speech_waveform)`` tuples
    (with speakers in ``manifest``), which skips decoding.
    """
    t = cfg.train
    if cfg.audio.features == "encoder" and not t.freeze_encoder:
        raise ConfigError("encoder fine-tuning is not supported; set train.freeze_encoder to true")
    if items is None:
        speakers, items = load_training_set(manifest, cfg)
    else:
        speakers = list(manifest)
    model = new_model(cfg, speakers)
    head_cfg = model.head_config
    for _, label, _ in items:
        if not 0 <= label < head_cfg.n_classes:
            raise DataError(f"label {label} outside [0, {head_cfg.n_classes})")

    seeds = component_seeds(t.seed)
    rng = np.random.default_rng(seeds["train"])
    policy = augment_policy(cfg, seeds["augment_pools"])

    stages = _stages(t)
    n_chunks = len(items) * t.chunks_per_utterance
    steps_per_epoch = math.ceil(n_chunks / t.batch_size)
    total_steps = steps_per_epoch * sum(e for _, e in stages)
    velocity = {k: np.zeros_like(v) for k, v in model.head.items()}
    durations = np.array([w.duration for _, _, w in items])

    result = TrainResult(model)
    log_fh = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    step = 0
    epoch = 0
    try:
        for spec, n_epochs in stages:
            for _ in range(n_epochs):
                epoch += 1
                order = rng.permutation(np.repeat(np.arange(len(items)), t.chunks_per_utterance))
                losses = []
                for b in range(steps_per_epoch):
                    batch = order[b * t.batch_size : (b + 1) * t.batch_size]
                    shortest = durations[batch].min()
                    if shortest < spec.min_dur:
                        raise ChunkTooShortError(
                            f"utterance {items[batch[durations[batch].argmin()]][0]!r} has "
                            f"{shortest:.2f} s of speech, below the {spec.min_dur} s chunk minimum"
                        )
                    sr = items[batch[0]][2].sample_rate
                    d = rng.uniform(spec.min_dur, min(spec.max_dur, shortest))
                    d = max(int(d * sr), math.ceil(spec.min_dur * sr)) / sr
                    fixed = ChunkSpec(d, d)
                    X, labels = [], []
                    for j in batch:
                        _, label, w = items[j]
                        chunk = random_chunk(w, fixed, rng)
                        if policy is not None:
                            chunk, _ = apply_policy(chunk, policy, int(rng.integers(2**63 - 1)))
                        X.append(features(chunk, cfg, model.encoder).frames)
                        labels.append(label)
                    X = np.stack(X)
                    labels = np.array(labels)

                    lr = one_cycle_lr(step, total_steps, t)
                    loss, grads = loss_and_grads(X, labels, model.head, head_cfg)
                    for name, w_arr in model.head.items():
                        g = grads[name]
                        if t.weight_decay:
                            g = g + t.weight_decay * w_arr
                        velocity[name] = t.momentum * velocity[name] + g
                        w_arr -= lr * velocity[name]
                    entry = {"step": step, "epoch": epoch, "lr": lr, "loss": loss}
                    if model.encoder is not None:
                        entry["encoder_grad_norm"] = 0.0
                    result.step_log.append(entry)
                    if log_fh is not None:
                        log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                    losses.append(loss)
                    step += 1
                summary = {"epoch": epoch, "mean_loss": float(np.mean(losses)), "steps": len(losses)}
                result.epoch_log.append(summary)
                log.info("epoch %d: mean loss %.4f", epoch, summary["mean_loss"])
                if checkpoint_dir is not None:
                    Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                    save_model(model, Path(checkpoint_dir) / f"epoch{epoch:03d}.svck")
    finally:
        if log_fh is not None:
            log_fh.close()
    return result
