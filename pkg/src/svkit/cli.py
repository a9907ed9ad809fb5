"""``svkit`` command-line interface.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
Diagnostics go to stderr; data is only ever written to files named by flags.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from svkit import __version__
from svkit.audio import read_wav, write_wav
from svkit.augment import apply_policy
from svkit.config import PipelineConfig, config_schema, load_config
from svkit.errors import ConfigError, DataError, SvkitError
from svkit.experiments import ablate_layers, extract_embeddings, run_pipeline
from svkit.formats import canonical_json, load_checkpoint, read_archive, write_archive
from svkit.metrics import format_table, metric_report, parse_trials, score_set
from svkit.pipeline import (
    augment_policy,
    component_seeds,
    features,
    load_audio,
    load_model,
    new_model,
    read_manifest,
    save_model,
    vad_filter,
)
from svkit.scoring import read_scores, score_trials, write_scores
from svkit.trainer import train

log = logging.getLogger("svkit")

SUBCOMMANDS = ("extract", "train", "score", "eval", "augment", "ablate-layers", "inspect")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _threads(value):
    if value is None:
        value = os.environ.get("SVKIT_THREADS")
    return int(value) if value else None


@contextlib.contextmanager
def _thread_limit(n):
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def _load_cfg(args) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.override("train", seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        cfg = cfg.override("train", epochs=args.epochs)
    if getattr(args, "layer", None) is not None:
        cfg = cfg.override("encoder", truncate_layer=args.layer)
    if getattr(args, "no_augment", False):
        cfg = cfg.override("augment", enabled=False)
    cfg.validate()
    return cfg


def _wav_list(args) -> list[tuple[str, str]]:
    if args.wav_dir:
        paths = sorted(Path(args.wav_dir).glob("*.wav"))
        if not paths:
            raise DataError(f"no WAV files in {args.wav_dir}")
        return [(p.stem, str(p)) for p in paths]
    return [(utt, path) for utt, path, _ in read_manifest(args.manifest)]


def cmd_extract(args) -> None:
    if args.checkpoint:
        model = load_model(args.checkpoint)
        if args.config:
            log.warning("--config ignored: the checkpoint carries its own configuration")
    else:
        cfg = _load_cfg(args)
        log.warning("no checkpoint given; embedding with a randomly initialized head")
        model = new_model(cfg, [])
    cfg = model.config
    utts = _wav_list(args)
    audio = [(utt, load_audio(path, cfg)) for utt, path in utts]
    archive = extract_embeddings(model, audio)
    write_archive(args.out, list(archive.items()))
    log.info("wrote %d embeddings to %s", len(archive), args.out)
    if args.features_out:
        records = []
        kind = "mfb" if cfg.audio.features == "mfb" else "hidden-state"
        for utt, w in audio:
            frames = features(vad_filter(w, cfg), cfg, model.encoder).frames
            records += [(f"{kind}:{utt}:{t:06d}", frames[t]) for t in range(frames.shape[0])]
        write_archive(args.features_out, records, dim=cfg.feature_dim)


def cmd_train(args) -> None:
    cfg = _load_cfg(args)
    manifest = read_manifest(args.manifest)
    result = train(manifest, cfg, log_path=args.log, checkpoint_dir=args.checkpoint_dir)
    save_model(result.model, args.out)
    if args.metrics:
        Path(args.metrics).write_text(canonical_json(result.epoch_log), encoding="utf-8")
    log.info("trained %d steps; final loss %.4f", len(result.step_log), result.step_log[-1]["loss"])


def cmd_score(args) -> None:
    cfg = _load_cfg(args)
    archive = read_archive(args.embeddings)
    trials = parse_trials(args.trials, args.key, args.src_meta)
    snorm = cfg.scoring.snorm if args.snorm is None else args.snorm
    chnorm = cfg.scoring.chnorm if args.chnorm is None else args.chnorm
    k = cfg.scoring.cohort_k if args.cohort_k is None else args.cohort_k
    cohort = None
    if snorm:
        if not args.cohort:
            raise ConfigError("s-norm requires --cohort")
        cohort = read_archive(args.cohort)
    records = score_trials(archive, trials, cohort=cohort, k=k, chnorm=chnorm)
    write_scores(args.out, records)
    log.info("scored %d trials", len(records))


def cmd_eval(args) -> None:
    cfg = _load_cfg(args)
    scores = read_scores(args.scores)
    trials = parse_trials(args.key)
    m = cfg.metrics
    report = metric_report(score_set(trials, scores), tuple(m.p_targets), m.c_miss, m.c_fa)
    Path(args.out).write_text(canonical_json(report), encoding="utf-8")
    if args.table:
        row = {"layer": args.label, **report}
        Path(args.table).write_text(format_table([row], p_targets=tuple(m.p_targets)), encoding="utf-8")
    log.info("EER %.4f", report["eer"])


def cmd_augment(args) -> None:
    cfg = _load_cfg(args)
    if not cfg.augment.enabled:
        raise ConfigError("augmentation is disabled in the config")
    w = read_wav(args.input)
    if w.sample_rate != cfg.audio.sample_rate:
        raise DataError(f"{args.input}: {w.sample_rate} Hz does not match pipeline rate {cfg.audio.sample_rate} Hz")
    seeds = component_seeds(cfg.train.seed)
    policy = augment_policy(cfg, seeds["augment_pools"])
    out, record = apply_policy(w, policy, np.random.default_rng(seeds["train"]))
    write_wav(out, args.out)
    if args.record:
        Path(args.record).write_text(canonical_json([r.to_dict() for r in record]), encoding="utf-8")


def cmd_ablate(args) -> None:
    cfg = _load_cfg(args)
    try:
        layers = [int(x) for x in args.layers.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad --layers value {args.layers!r}") from None
    if not layers:
        raise ConfigError("--layers is empty")
    train_rows = read_manifest(args.manifest)
    eval_rows = read_manifest(args.eval_manifest)
    trials = parse_trials(args.trials)
    rows = ablate_layers(cfg, layers, train_rows, eval_rows, trials)
    p = tuple(cfg.metrics.p_targets)
    Path(args.out).write_text(format_table(rows, args.train_set, p), encoding="utf-8")
    if args.json:
        Path(args.json).write_text(canonical_json(rows), encoding="utf-8")


def cmd_inspect(args) -> None:
    info: dict
    if args.schema:
        info = config_schema()
    elif args.default_config:
        info = PipelineConfig().to_dict()
    elif args.config:
        info = load_config(args.config).to_dict()
    elif args.checkpoint:
        meta, tensors = load_checkpoint(args.checkpoint)
        info = {
            "metadata": meta,
            "tensors": {k: list(v.shape) for k, v in tensors.items()},
            "parameters": int(sum(v.size for v in tensors.values())),
        }
    elif args.archive:
        arch = read_archive(args.archive)
        dims = {v.shape[0] for v in arch.values()}
        info = {"count": len(arch), "dim": dims.pop() if dims else 0, "ids": list(arch)[:10]}
    else:
        raise UsageError("inspect: give one of --schema, --default-config, --config, --checkpoint, --archive")
    text = canonical_json(info)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stderr.write(text)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="svkit", description="desk-scale speaker verification toolkit")
    ap.add_argument("--version", action="version", version=f"svkit {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, seed=True):
        p.add_argument("--config", help="pipeline config JSON")
        p.add_argument("--threads", type=int, help="BLAS thread cap (default: $SVKIT_THREADS)")
        if seed:
            p.add_argument("--seed", type=int, help="overrides train.seed")

    p = sub.add_parser("extract", help="embed utterances into an SVEB archive")
    common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--wav-dir")
    src.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--layer", type=int, help="overrides encoder.truncate_layer (no-checkpoint mode)")
    p.add_argument("--out", required=True)
    p.add_argument("--features-out", help="also dump per-frame features as an SVEB archive")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train the embedding head")
    common(p)
    p.add_argument("--manifest", required=True, help="utt_id<TAB>path<TAB>speaker TSV")
    p.add_argument("--out", required=True, help="final SVCK checkpoint")
    p.add_argument("--log", help="per-step JSON-lines log")
    p.add_argument("--metrics", help="per-epoch summary JSON")
    p.add_argument("--checkpoint-dir", help="write an SVCK checkpoint at every epoch boundary")
    p.add_argument("--epochs", type=int)
    p.add_argument("--layer", type=int)
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="cosine-score a trial list")
    common(p, seed=False)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--key")
    p.add_argument("--src-meta", help="utt_id<TAB>tel|mic TSV")
    p.add_argument("--cohort", help="SVEB archive of cohort embeddings")
    p.add_argument("--snorm", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--chnorm", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--cohort-k", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="EER / minDCF report for a scores file")
    common(p, seed=False)
    p.add_argument("--scores", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--out", required=True, help="JSON report")
    p.add_argument("--table", help="also write an aligned text table")
    p.add_argument("--label", default="-", help="row label for --table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment", help="apply the augmentation policy to one WAV")
    common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--record", help="JSON list of applied augmentations")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("ablate-layers", help="per-layer metrics table for a frozen encoder")
    common(p)
    p.add_argument("--layers", required=True, help="comma-separated 1-based layers, e.g. 1,3,6")
    p.add_argument("--manifest", required=True, help="training manifest")
    p.add_argument("--eval-manifest", required=True)
    p.add_argument("--trials", required=True, help="labelled trial TSV")
    p.add_argument("--out", required=True, help="text table")
    p.add_argument("--json", help="rows as JSON")
    p.add_argument("--train-set", default="-")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="describe a checkpoint, archive or config")
    p.add_argument("--checkpoint")
    p.add_argument("--archive")
    p.add_argument("--config")
    p.add_argument("--schema", action="store_true", help="the pipeline config JSON schema")
    p.add_argument("--default-config", action="store_true")
    p.add_argument("--out")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_inspect)
    return ap


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
    except UsageError as exc:
        sys.stderr.write(str(exc).rstrip("\n") + "\n")
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="svkit: %(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        with _thread_limit(_threads(getattr(args, "threads", None))):
            args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    except (SvkitError, OSError, ValueError) as exc:
        sys.stderr.write(f"svkit {args.command}: error: {exc}\n")
        return 2
    return 0


def main() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    main()
