"""Trial-list parsing and detection metrics (EER, minDCF).

Decision rule everywhere: accept iff ``score >= threshold``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from svkit.errors import DataError
from svkit.scoring import SOURCE_TYPES, Trial

LABELS = ("target", "nontarget")


@dataclass(frozen=True, eq=False)
class ScoreSet:
    target_scores: np.ndarray
    nontarget_scores: np.ndarray

    def __post_init__(self):
        for name in ("target_scores", "nontarget_scores"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).ravel()
            if arr.size == 0:
                raise DataError(f"{name} is empty")
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contains non-finite values")
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class DcfParams:
    p_tar: float
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0 < self.p_tar < 1:
            raise DataError(f"p_tar must be in (0, 1), got {self.p_tar}")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise DataError("detection costs must be positive")


def _split_tsv(path, min_fields: int, max_fields: int):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if not min_fields <= len(fields) <= max_fields:
                raise DataError(
                    f"{path}:{lineno}: expected {min_fields}-{max_fields} tab-separated fields, got {len(fields)}"
                )
            if any(not f for f in fields):
                raise DataError(f"{path}:{lineno}: empty field")
            yield lineno, fields


def read_key(path) -> dict[tuple[str, str], str]:
    key: dict[tuple[str, str], str] = {}
    for lineno, (enr, test, label) in _split_tsv(path, 3, 3):
        if label not in LABELS:
            raise DataError(f"{path}:{lineno}: unknown label {label!r}")
        if (enr, test) in key:
            raise DataError(f"{path}:{lineno}: duplicate trial {enr} {test}")
        key[(enr, test)] = label
    return key


def read_source_meta(path) -> dict[str, str]:
    meta = {}
    for lineno, (utt, src) in _split_tsv(path, 2, 2):
        if src not in SOURCE_TYPES:
            raise DataError(f"{path}:{lineno}: source type must be one of {SOURCE_TYPES}, got {src!r}")
        meta[utt] = src
    return meta


def parse_trials(trial_path, key_path=None, src_meta_path=None) -> list[Trial]:
    """Read ``enroll<TAB>test[<TAB>label]`` lines into :class:`Trial` objects.

    Labels may also come from a separate key file; source types are joined
    from a ``utt<TAB>src`` file when given.
    """
    key = read_key(key_path) if key_path is not None else None
    meta = read_source_meta(src_meta_path) if src_meta_path is not None else None
    trials = []
    seen = set()
    for lineno, fields in _split_tsv(trial_path, 2, 3):
        enr, test = fields[0], fields[1]
        label = fields[2] if len(fields) == 3 else None
        if label is not None and label not in LABELS:
            raise DataError(f"{trial_path}:{lineno}: unknown label {label!r}")
        if (enr, test) in seen:
            raise DataError(f"{trial_path}:{lineno}: duplicate trial ({enr}, {test})")
        seen.add((enr, test))
        if key is not None:
            if (enr, test) not in key:
                raise DataError(f"{trial_path}:{lineno}: trial ({enr}, {test}) missing from key")
            if label is not None and label != key[(enr, test)]:
                raise DataError(f"{trial_path}:{lineno}: label disagrees with key")
            label = key[(enr, test)]
        srcs = (None, None)
        if meta is not None:
            for utt in (enr, test):
                if utt not in meta:
                    raise DataError(f"{trial_path}:{lineno}: no source type for {utt!r}")
            srcs = (meta[enr], meta[test])
        trials.append(Trial(enr, test, label, *srcs))
    return trials


def score_set(trials: list[Trial], scores: dict[tuple[str, str], float]) -> ScoreSet:
    tar, non = [], []
    for t in trials:
        if t.label is None:
            raise DataError(f"trial {t.key} has no label")
        if t.key not in scores:
            raise DataError(f"no score for trial {t.enroll_id} {t.test_id}")
        (tar if t.label == "target" else non).append(scores[t.key])
    return ScoreSet(np.array(tar), np.array(non))


def _operating_points(s: ScoreSet):
    """Thresholds at every distinct score plus +inf, with miss and false-alarm rates."""
    tar = np.sort(s.target_scores)
    non = np.sort(s.nontarget_scores)
    thr = np.append(np.unique(np.concatenate([tar, non])), np.inf)
    p_miss = np.searchsorted(tar, thr, side="left") / tar.size
    p_fa = (non.size - np.searchsorted(non, thr, side="left")) / non.size
    return thr, p_miss, p_fa


def compute_eer(s: ScoreSet) -> tuple[float, float]:
    """Equal error rate by linear interpolation between bracketing ROC points."""
    thr, p_miss, p_fa = _operating_points(s)
    d = p_miss - p_fa
    i = int(np.argmax(d >= 0))
    if d[i] == 0:
        return float(p_miss[i]), float(thr[i])
    t = -d[i - 1] / (d[i] - d[i - 1])
    eer = p_miss[i - 1] + t * (p_miss[i] - p_miss[i - 1])
    if np.isfinite(thr[i]):
        threshold = thr[i - 1] + t * (thr[i] - thr[i - 1])
    else:
        threshold = thr[i - 1]
    return float(eer), float(threshold)


def compute_min_dcf(s: ScoreSet, p: DcfParams) -> tuple[float, float]:
    """Normalized minimum detection cost and the threshold attaining it."""
    thr, p_miss, p_fa = _operating_points(s)
    cost = p.c_miss * p.p_tar * p_miss + p.c_fa * (1 - p.p_tar) * p_fa
    norm = min(p.c_miss * p.p_tar, p.c_fa * (1 - p.p_tar))
    # reject-all (+inf) attains c_miss * p_tar, accept-all attains c_fa * (1 - p_tar)
    i = int(np.argmin(cost))
    return float(cost[i] / norm), float(thr[i])


def dcf_key(p_tar: float) -> str:
    return "min_dcf_" + f"{p_tar:g}".replace(".", "")


def metric_report(s: ScoreSet, p_targets=(0.01, 0.05), c_miss: float = 1.0, c_fa: float = 1.0) -> dict:
    eer, eer_thr = compute_eer(s)
    report = {
        "eer": eer,
        "eer_threshold": eer_thr,
        "counts": {"target": int(s.target_scores.size), "nontarget": int(s.nontarget_scores.size)},
    }
    for p_tar in p_targets:
        report[dcf_key(p_tar)] = compute_min_dcf(s, DcfParams(p_tar, c_miss, c_fa))[0]
    return report


def format_table(rows: list[dict], train_set: str = "", p_targets=(0.01, 0.05)) -> str:
    """Aligned text table, one row per encoder layer (or system).

    Each row needs ``layer`` plus the keys of :func:`metric_report`. EER is
    printed in percent.
    """
    headers = ["Layer", "Train set", "EER(%)"] + [f"DCF({p:g})" for p in p_targets]
    body = []
    for row in rows:
        cells = [str(row["layer"]), row.get("train_set", train_set) or "-", f"{100 * row['eer']:.2f}"]
        cells += [f"{row[dcf_key(p)]:.3f}" for p in p_targets]
        body.append(cells)
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h) for i, h in enumerate(headers)]

    def line(cells):
        return "| " + " | ".join(c.rjust(w) for c, w in zip(cells, widths)) + " |"

    rule = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    out = [rule, line(headers), rule] + [line(r) for r in body] + [rule]
    return "\n".join(out) + "\n"


def write_text(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")
