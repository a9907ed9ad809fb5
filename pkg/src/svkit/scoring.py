"""Cosine trial scoring with adaptive s-norm and per-channel normalization."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, replace

import numpy as np

from svkit.errors import DataError

log = logging.getLogger(__name__)

SOURCE_TYPES = ("tel", "mic")
SOURCE_PAIRS = ("tel-tel", "mic-mic", "tel-mic", "mic-tel")


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    label: str | None = None
    enroll_src: str | None = None
    test_src: str | None = None

    def __post_init__(self):
        if not self.enroll_id or not self.test_id:
            raise DataError("trial ids must be non-empty")
        if self.label not in (None, "target", "nontarget"):
            raise DataError(f"unknown trial label {self.label!r}")
        if (self.enroll_src is None) != (self.test_src is None):
            raise DataError(f"trial {self.key}: source types must be given for both sides or neither")
        for src in (self.enroll_src, self.test_src):
            if src is not None and src not in SOURCE_TYPES:
                raise DataError(f"unknown source type {src!r}")

    @property
    def key(self) -> tuple[str, str]:
        return (self.enroll_id, self.test_id)

    @property
    def src_pair(self) -> str | None:
        return None if self.enroll_src is None else f"{self.enroll_src}-{self.test_src}"


@dataclass(frozen=True)
class ScoreRecord:
    trial: Trial
    raw_score: float
    normalized_score: float | None = None

    @property
    def score(self) -> float:
        return self.raw_score if self.normalized_score is None else self.normalized_score

    @property
    def src_pair(self) -> str | None:
        return self.trial.src_pair


def cosine_score(e1, e2) -> float:
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if e1.shape != e2.shape:
        raise DataError(f"embedding dims differ: {e1.shape} vs {e2.shape}")
    n1, n2 = np.linalg.norm(e1), np.linalg.norm(e2)
    if n1 == 0 or n2 == 0:
        raise DataError("cosine score of a zero vector")
    return float(np.clip(e1 @ e2 / (n1 * n2), -1.0, 1.0))


def top_k_stats(scores, k: int, side: str = "") -> tuple[float, float]:
    """Mean and population std of the ``k`` largest scores."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[0] < k:
        raise DataError(f"{side} cohort has {scores.shape[0]} scores, need at least K={k}")
    top = np.sort(scores, kind="stable")[-k:]
    sigma = float(top.std())
    if not sigma > 0:
        raise DataError(f"degenerate {side} cohort: top-{k} scores have zero spread")
    return float(top.mean()), sigma


def adaptive_snorm(raw: float, enroll_cohort_scores, test_cohort_scores, k: int = 200) -> float:
    """Symmetric adaptive s-norm over each side's top-``k`` cohort scores."""
    mu_e, sd_e = top_k_stats(enroll_cohort_scores, k, "enroll")
    mu_t, sd_t = top_k_stats(test_cohort_scores, k, "test")
    return 0.5 * ((raw - mu_e) / sd_e + (raw - mu_t) / sd_t)


def channel_normalize(records: list[ScoreRecord]) -> list[ScoreRecord]:
    """Standardize scores within each source-type pair group."""
    groups: dict[str, list[int]] = defaultdict(list)
    for i, rec in enumerate(records):
        pair = rec.src_pair
        if pair is None:
            raise DataError(f"trial {rec.trial.key} has no source-type metadata")
        groups[pair].append(i)
    stats = {}
    for pair, idx in groups.items():
        # sorted so the statistics do not depend on record order, bit for bit
        vals = np.sort([records[i].score for i in idx])
        sigma = float(vals.std())
        if not sigma > 0:
            raise DataError(f"channel group {pair} has zero score variance")
        stats[pair] = (float(vals.mean()), sigma)
    out = []
    for rec in records:
        mu, sigma = stats[rec.src_pair]
        out.append(replace(rec, normalized_score=(rec.score - mu) / sigma))
    return out


def _unit_rows(ids, archive) -> np.ndarray:
    mat = np.stack([archive[i] for i in ids])
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms == 0):
        bad = [ids[j] for j in np.flatnonzero(norms[:, 0] == 0)]
        raise DataError(f"zero embedding for {bad[0]!r}")
    return mat / norms


def score_trials(
    archive: dict[str, np.ndarray],
    trials: list[Trial],
    cohort: dict[str, np.ndarray] | None = None,
    k: int = 200,
    chnorm: bool = False,
) -> list[ScoreRecord]:
    """Score every trial; s-norm first (if a cohort is given), then channel norm."""
    for t in trials:
        for utt in t.key:
            if utt not in archive:
                raise DataError(f"no embedding for id {utt!r}")
    if chnorm and any(t.src_pair is None for t in trials):
        raise DataError("channel normalization requested but trials lack source-type metadata")

    records = [ScoreRecord(t, cosine_score(archive[t.enroll_id], archive[t.test_id])) for t in trials]
    if cohort is not None:
        trial_ids = {u for t in trials for u in t.key}
        overlap = trial_ids & set(cohort)
        if overlap:
            log.warning("s-norm cohort shares %d ids with the trial list (cohort contamination)", len(overlap))
        cohort_ids = list(cohort)
        cohort_mat = _unit_rows(cohort_ids, cohort)
        side_ids = sorted(trial_ids)
        side_scores = dict(zip(side_ids, _unit_rows(side_ids, archive) @ cohort_mat.T))
        records = [
            replace(r, normalized_score=adaptive_snorm(r.raw_score, side_scores[r.trial.enroll_id],
                                                       side_scores[r.trial.test_id], k))
            for r in records
        ]
    if chnorm:
        records = channel_normalize(records)
    return records


def write_scores(path, records: list[ScoreRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(f"{rec.trial.enroll_id}\t{rec.trial.test_id}\t{rec.score:.17g}\n")


def read_scores(path) -> dict[tuple[str, str], float]:
    out: dict[tuple[str, str], float] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
            try:
                score = float(fields[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad score {fields[2]!r}") from None
            if not np.isfinite(score):
                raise DataError(f"{path}:{lineno}: non-finite score")
            key = (fields[0], fields[1])
            if key in out:
                raise DataError(f"{path}:{lineno}: duplicate trial {key[0]} {key[1]}")
            out[key] = score
    return out
