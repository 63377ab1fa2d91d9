"""Evaluation metrics: per-frame AP/mAP, regression errors, BLEU-4, CIDEr-D, Spearman."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "average_precision",
    "per_class_ap",
    "mean_ap",
    "bleu4",
    "corpus_bleu4",
    "cider_d",
    "spearman",
    "mse",
    "mae",
    "accuracy",
    "MetricReport",
    "BLEU_SMOOTHING",
    "AP_TIE_RULE",
]

BLEU_SMOOTHING = "add-one on zero matched counts for n>=2"
AP_TIE_RULE = "descending score, ties in original order"


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float | None:
    """Mean over positives of the precision at each positive's rank.

    Returns ``None`` (class skipped) when there is no positive.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    if not labels.any():
        return None
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.nonzero(hits)[0] + 1
    precision = np.arange(1, ranks.size + 1) / ranks
    return float(precision.mean())


def per_class_ap(scores: np.ndarray, labels: np.ndarray, class_ids: Sequence[int],
                 names: Sequence[str] | None = None) -> dict[str, float | None]:
    """One-vs-rest AP over all frames for each listed class column."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    out = {}
    for j, c in enumerate(class_ids):
        key = names[j] if names is not None else str(c)
        out[key] = average_precision(scores[:, c], labels == c)
    return out


def mean_ap(aps) -> float:
    """Unweighted mean over classes that were not skipped."""
    values = list(aps.values()) if isinstance(aps, dict) else list(aps)
    kept = [a for a in values if a is not None]
    if not kept:
        raise ValueError("every class was skipped (no positives); mAP undefined")
    return float(np.mean(kept))


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def _bleu_stats(hyp: Sequence[str], refs: Sequence[Sequence[str]]) -> np.ndarray:
    """[hyp_len, closest_ref_len, matched_1, total_1, ..., matched_4, total_4]."""
    stats = [len(hyp), min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]]
    for n in range(1, 5):
        h = _ngrams(hyp, n)
        best: Counter = Counter()
        for r in refs:
            best |= _ngrams(r, n)
        stats.append(sum(min(c, best[g]) for g, c in h.items()))
        stats.append(max(len(hyp) - n + 1, 0))
    return np.array(stats, dtype=np.float64)


def _bleu_from_stats(s: np.ndarray) -> float:
    c, r = s[0], s[1]
    if c == 0:
        return 0.0
    log_p = 0.0
    for n in range(4):
        matched, total = s[2 + 2 * n], s[3 + 2 * n]
        if n >= 1 and matched == 0:
            matched, total = matched + 1, total + 1
        if matched == 0:
            return 0.0
        log_p += math.log(matched / total) / 4
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return float(bp * math.exp(log_p))


def _tok(x) -> list[str]:
    return x.lower().split() if isinstance(x, str) else list(x)


def bleu4(hypothesis, references) -> float:
    """Sentence-level BLEU-4 with clipping, brevity penalty and add-one smoothing."""
    refs = [_tok(r) for r in references]
    if not refs:
        raise ValueError("bleu4 needs at least one reference")
    return _bleu_from_stats(_bleu_stats(_tok(hypothesis), refs))


def corpus_bleu4(hypotheses: Sequence, references: Sequence[Sequence]) -> float:
    """Corpus BLEU-4: n-gram counts and lengths summed over all pairs first."""
    if len(hypotheses) != len(references) or not hypotheses:
        raise ValueError("need equally many (>0) hypotheses and reference lists")
    total = sum(_bleu_stats(_tok(h), [_tok(r) for r in refs]) for h, refs in zip(hypotheses, references))
    return _bleu_from_stats(total)


def _cider_vec(tokens, df: dict, log_n: float):
    vec = [dict() for _ in range(4)]
    norm = np.zeros(4)
    for n in range(1, 5):
        for g, tf in _ngrams(tokens, n).items():
            w = tf * (log_n - math.log(max(1.0, df.get(g, 0.0))))
            vec[n - 1][g] = w
            norm[n - 1] += w * w
    return vec, np.sqrt(norm), len(tokens)


def cider_d(hypotheses: Sequence, references: Sequence[Sequence], sigma: float = 6.0) -> float:
    """Corpus CIDEr-D (mean over items of the per-item score).

    TF-IDF n-gram vectors for n = 1..4 with document frequencies over the
    reference sets, hypothesis weights clipped by the reference weights, a
    Gaussian length penalty and the customary x10 scale.
    """
    if not references or len(hypotheses) != len(references):
        raise ValueError("cider_d needs a non-empty corpus with one reference list per hypothesis")
    refs_tok = [[_tok(r) for r in refs] for refs in references]
    df: Counter = Counter()
    for refs in refs_tok:
        df.update({g for r in refs for n in range(1, 5) for g in _ngrams(r, n)})
    log_n = math.log(float(len(refs_tok)))
    scores = []
    for hyp, refs in zip(hypotheses, refs_tok):
        vh, nh, lh = _cider_vec(_tok(hyp), df, log_n)
        item = np.zeros(4)
        for r in refs:
            vr, nr, lr = _cider_vec(r, df, log_n)
            penalty = math.exp(-((lh - lr) ** 2) / (2 * sigma ** 2))
            for n in range(4):
                val = sum(min(w, vr[n].get(g, 0.0)) * vr[n].get(g, 0.0) for g, w in vh[n].items())
                if nh[n] != 0 and nr[n] != 0:
                    val /= nh[n] * nr[n]
                item[n] += val * penalty
        scores.append(10.0 * item.mean() / len(refs))
    return float(np.mean(scores))


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of average-on-ties ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("spearman needs two equal-length sequences of length >= 2")
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float((rx * rx).sum() * (ry * ry).sum()))
    if denom == 0:
        raise ValueError("spearman undefined: an input has zero rank variance")
    return float((rx * ry).sum() / denom)


def mse(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def mae(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred - target)))


def accuracy(scores, labels) -> float:
    scores, labels = np.asarray(scores), np.asarray(labels)
    if labels.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(np.argmax(scores, axis=1) == labels))


@dataclass
class MetricReport:
    per_class_ap: dict = field(default_factory=dict)
    mAP: float | None = None
    drive_mse: float | None = None
    drive_mae: float | None = None
    accuracy: float | None = None
    cause_accuracy: float | None = None
    bleu4: float | None = None
    cider_d: float | None = None
    spearman: float | None = None
    meteor: None = None
    metadata: dict = field(default_factory=lambda: {
        "bleu_smoothing": BLEU_SMOOTHING,
        "ap_ties": AP_TIE_RULE,
        "ap_protocol": "one-vs-rest per cause over all evaluated frames; background frames are negatives",
        "meteor": "not computed",
    })

    def __post_init__(self):
        for key in ("mAP", "drive_mse", "drive_mae", "accuracy", "cause_accuracy", "bleu4", "cider_d", "spearman"):
            v = getattr(self, key)
            if v is not None and not math.isfinite(v):
                raise ValueError(f"{key} is not finite: {v}")
        for key in ("mAP", "accuracy", "cause_accuracy"):
            v = getattr(self, key)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{key} outside [0, 1]: {v}")

    def to_dict(self) -> dict:
        return {
            "per_class_ap": dict(self.per_class_ap),
            "mAP": self.mAP,
            "drive_mse": self.drive_mse,
            "drive_mae": self.drive_mae,
            "accuracy": self.accuracy,
            "cause_accuracy": self.cause_accuracy,
            "bleu4": self.bleu4,
            "cider_d": self.cider_d,
            "spearman": self.spearman,
            "meteor": None,
            "metadata": dict(self.metadata),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "ap"])
        for k, v in self.per_class_ap.items():
            w.writerow([k, "" if v is None else repr(v)])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        d.pop("meteor", None)
        return cls(**d)
