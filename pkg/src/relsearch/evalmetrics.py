"""Evaluation metrics: 5-scale accuracy, thresholded AUROC, nDCG@K, precision@K.

Levels map to gains 0, 0.25, 0.5, 0.75, 1.0. AUROC is the Mann-Whitney
statistic (ties count half) computed via average ranks. nDCG@K normalizes
the discounted gain by an ideal list that has maximal gain 1.0 at every
rank, i.e. it assumes unlimited top-level inventory rather than re-sorting
the observed list.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import NUM_LEVELS, SoftLabel

THRESHOLDS = (3, 4, 5)


class MetricError(ValueError):
    pass


@dataclass
class ScoredExample:
    predicted: SoftLabel
    true_label: SoftLabel


@dataclass
class EvalReport:
    accuracy: float
    auroc_3plus: float | None
    auroc_4plus: float | None
    auroc_5plus: float | None
    n_examples: int
    ndcg_at_k: dict[int, float] = dc_field(default_factory=dict)
    precision_at_k: dict[int, float] = dc_field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "auroc_3plus": self.auroc_3plus,
            "auroc_4plus": self.auroc_4plus,
            "auroc_5plus": self.auroc_5plus,
            "n_examples": self.n_examples,
            "ndcg_at_k": {str(k): v for k, v in sorted(self.ndcg_at_k.items())},
            "precision_at_k": {str(k): v for k, v in sorted(self.precision_at_k.items())},
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalReport":
        return cls(
            accuracy=obj["accuracy"],
            auroc_3plus=obj["auroc_3plus"],
            auroc_4plus=obj["auroc_4plus"],
            auroc_5plus=obj["auroc_5plus"],
            n_examples=obj["n_examples"],
            ndcg_at_k={int(k): v for k, v in obj.get("ndcg_at_k", {}).items()},
            precision_at_k={int(k): v for k, v in obj.get("precision_at_k", {}).items()},
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def text_table(self) -> str:
        def fmt(x: float | None) -> str:
            return "-" if x is None else f"{x:.3f}"

        lines = [
            f"{'metric':<16}{'value':>8}",
            f"{'accuracy':<16}{fmt(self.accuracy):>8}",
            f"{'auroc 3+':<16}{fmt(self.auroc_3plus):>8}",
            f"{'auroc 4+':<16}{fmt(self.auroc_4plus):>8}",
            f"{'auroc 5+':<16}{fmt(self.auroc_5plus):>8}",
        ]
        for k, v in sorted(self.ndcg_at_k.items()):
            lines.append(f"{f'ndcg@{k}':<16}{fmt(v):>8}")
        for k, v in sorted(self.precision_at_k.items()):
            lines.append(f"{f'precision@{k}':<16}{fmt(v):>8}")
        lines.append(f"{'n':<16}{self.n_examples:>8}")
        return "\n".join(lines)


def relevance_gain(level: int) -> float:
    """Map level L in 1..5 to gain 0.25 * (L - 1)."""
    if not 1 <= level <= NUM_LEVELS:
        raise MetricError(f"level must be in 1..{NUM_LEVELS}, got {level}")
    return 0.25 * (level - 1)


def accuracy(scored: Sequence[ScoredExample]) -> float:
    """Fraction of examples whose predicted argmax level matches the true one.

    Argmax ties break toward the lowest level on both sides.
    """
    if not scored:
        raise MetricError("accuracy of an empty list is undefined")
    hits = sum(
        1 for ex in scored if ex.predicted.argmax_level() == ex.true_label.argmax_level()
    )
    return hits / len(scored)


def binarized_score(predicted: SoftLabel, threshold: int) -> float:
    """Probability mass at or above the threshold level."""
    if threshold not in THRESHOLDS:
        raise MetricError(f"threshold must be one of {THRESHOLDS}, got {threshold}")
    return sum(predicted.probs[threshold - 1 :])


def auroc(scores: Sequence[float], positives: Sequence[bool]) -> float:
    """Mann-Whitney AUROC: P(score_pos > score_neg) + 0.5 P(tie).

    Computed from average ranks; requires at least one positive and one
    negative, otherwise the metric is undefined and a MetricError is raised.
    """
    if len(scores) != len(positives):
        raise MetricError("scores and positives must have equal length")
    y = np.asarray(positives, dtype=bool)
    n_pos = int(y.sum())
    n_neg = int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC undefined: need at least one positive and one negative")
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(s, kind="stable")
    ranks = np.empty(len(s), dtype=np.float64)
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[order[j + 1]] == s[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average of ranks i+1..j+1
        i = j + 1
    rank_sum_pos = float(ranks[y].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def ndcg_at_k(levels: Sequence[int], k: int) -> float:
    """Discounted gain over the top k, against an all-maximal ideal.

    ndcg@k = sum_{i=1..k} gain(L_i) / log2(1+i)  /  sum_{i=1..k} 1 / log2(1+i)
    with lists shorter than k padded with gain-0 entries.
    """
    if k < 1:
        raise MetricError(f"k must be >= 1, got {k}")
    if not levels:
        raise MetricError("ranked list must be non-empty")
    num = 0.0
    den = 0.0
    for i in range(1, k + 1):
        discount = 1.0 / math.log2(1 + i)
        den += discount
        if i <= len(levels):
            num += relevance_gain(levels[i - 1]) * discount
    return num / den


def precision_at_k(levels: Sequence[int], k: int) -> float:
    """Mean mapped gain over the top k ranks, padding with gain 0."""
    if k < 1:
        raise MetricError(f"k must be >= 1, got {k}")
    if not levels:
        raise MetricError("ranked list must be non-empty")
    return sum(relevance_gain(level) for level in levels[:k]) / k


def build_report(
    scored: Sequence[ScoredExample],
    ranked_lists: Sequence[Sequence[int]] = (),
    ks: Sequence[int] = (8, 20),
) -> EvalReport:
    """Aggregate the metric suite; undefined metrics stay absent (None/empty)."""
    acc = accuracy(scored)
    aurocs: dict[int, float | None] = {}
    for threshold in THRESHOLDS:
        scores = [binarized_score(ex.predicted, threshold) for ex in scored]
        positives = [ex.true_label.argmax_level() >= threshold for ex in scored]
        try:
            aurocs[threshold] = auroc(scores, positives)
        except MetricError:
            aurocs[threshold] = None

    ndcgs: dict[int, float] = {}
    precisions: dict[int, float] = {}
    if ranked_lists:
        for k in ks:
            ndcgs[k] = float(np.mean([ndcg_at_k(lst, k) for lst in ranked_lists]))
            precisions[k] = float(np.mean([precision_at_k(lst, k) for lst in ranked_lists]))

    return EvalReport(
        accuracy=acc,
        auroc_3plus=aurocs[3],
        auroc_4plus=aurocs[4],
        auroc_5plus=aurocs[5],
        n_examples=len(scored),
        ndcg_at_k=ndcgs,
        precision_at_k=precisions,
    )
