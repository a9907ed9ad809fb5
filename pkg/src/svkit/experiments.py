"""End-to-end runs: train, extract, score, evaluate; and the layer ablation."""

from __future__ import annotations

import logging
import time

from svkit.config import PipelineConfig
from svkit.errors import ConfigError, DataError
from svkit.metrics import metric_report, score_set
from svkit.pipeline import Model, embed_waveform, load_audio
from svkit.scoring import Trial, score_trials
from svkit.trainer import load_training_set, train

log = logging.getLogger(__name__)


def extract_embeddings(model: Model, utterances) -> dict:
    """``{utt_id: embedding}`` for an iterable of ``(utt_id, Waveform)``."""
    return {utt: embed_waveform(w, model) for utt, w in utterances}


def load_eval_audio(rows, cfg: PipelineConfig) -> list:
    return [(utt, load_audio(path, cfg)) for utt, path, _ in rows]


def evaluate(model: Model, archive: dict, trials: list[Trial], cohort: dict | None = None) -> dict:
    cfg = model.config
    if cfg.scoring.snorm and cohort is None:
        raise ConfigError("scoring.snorm is enabled but no cohort was supplied")
    records = score_trials(
        archive,
        trials,
        cohort=cohort if cfg.scoring.snorm else None,
        k=cfg.scoring.cohort_k,
        chnorm=cfg.scoring.chnorm,
    )
    scores = {r.trial.key: r.score for r in records}
    m = cfg.metrics
    return metric_report(score_set(trials, scores), tuple(m.p_targets), m.c_miss, m.c_fa)


def run_pipeline(cfg: PipelineConfig, train_rows, eval_rows, trials: list[Trial], _cache: dict | None = None) -> dict:
    """Train a head, embed the evaluation utterances and score ``trials``.

    With s-norm enabled the training utterances serve as the cohort.
    """
    cache = {} if _cache is None else _cache
    if "train" not in cache:
        cache["train"] = load_training_set(train_rows, cfg)
        cache["eval"] = load_eval_audio(eval_rows, cfg)
    speakers, items = cache["train"]
    eval_audio = cache["eval"]
    known = {utt for utt, _ in eval_audio}
    for t in trials:
        for utt in t.key:
            if utt not in known:
                raise DataError(f"trial id {utt!r} not in the evaluation manifest")

    model = train(speakers, cfg, items=items).model
    archive = extract_embeddings(model, eval_audio)
    cohort = None
    if cfg.scoring.snorm:
        cohort = {f"cohort:{utt}": embed_waveform(w, model) for utt, _, w in items}
    return evaluate(model, archive, trials, cohort)


def ablate_layers(cfg: PipelineConfig, layers, train_rows, eval_rows, trials: list[Trial]) -> list[dict]:
    """One metrics row per encoder layer, training a fresh head on each frozen truncation."""
    n_layers = cfg.encoder.n_layers
    bad = [L for L in layers if not 1 <= L <= n_layers]
    if bad:
        raise ConfigError(f"layers {bad} outside [1, {n_layers}]")
    if cfg.audio.features != "encoder":
        cfg = cfg.override("audio", features="encoder", sample_rate=16000)
    cfg = cfg.override("train", freeze_encoder=True)
    cache: dict = {}
    rows = []
    for layer in layers:
        layer_cfg = cfg.override("encoder", truncate_layer=int(layer))
        start = time.process_time()
        report = run_pipeline(layer_cfg, train_rows, eval_rows, trials, cache)
        log.info("layer %d: EER %.4f (%.1f s CPU)", layer, report["eer"], time.process_time() - start)
        rows.append({"layer": int(layer), **report})
    return rows
