"""Retrieval, grounding and VQA metrics.

Score ties are broken by ascending candidate index everywhere, so every
metric is a deterministic function of its inputs.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

IOU_THRESHOLD = 0.5


def iou(a, b) -> float:
    """Intersection over union of two ``(x1, y1, x2, y2)`` boxes."""
    for box in (a, b):
        if not (box[0] < box[2] and box[1] < box[3]):
            raise ValueError(f"degenerate box {tuple(box)}")
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def rank_candidates(scores) -> np.ndarray:
    """Candidate indices by descending score, ties by ascending index."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


@dataclass(frozen=True)
class RankedList:
    ranking: tuple[int, ...]
    gold: frozenset[int]

    def __post_init__(self):
        if len(set(self.ranking)) != len(self.ranking):
            raise ValueError("ranking contains duplicate ids")
        if not self.gold <= set(self.ranking):
            raise ValueError("gold ids must be among the candidates")

    @classmethod
    def from_scores(cls, scores, gold: Iterable[int]) -> "RankedList":
        return cls(tuple(int(i) for i in rank_candidates(scores)), frozenset(gold))

    def first_hit(self) -> int | None:
        """1-based rank of the best-placed gold id."""
        for r, c in enumerate(self.ranking, start=1):
            if c in self.gold:
                return r
        return None


def recall_at_k(queries: Sequence[RankedList], k: int) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    if not queries:
        raise ValueError("recall@K of an empty query set")
    hits = sum(1 for q in queries if (r := q.first_hit()) is not None and r <= k)
    return hits / len(queries)


def vg_recall_at_k(phrase_scores, region_boxes, gold_boxes, k: int) -> float:
    """Phrases are queries over regions; a region is correct iff IoU >= 0.5 with the phrase's gold box."""
    return recall_at_k(grounding_queries(phrase_scores, region_boxes, gold_boxes), k)


def grounding_queries(phrase_scores, region_boxes, gold_boxes) -> list[RankedList]:
    scores = np.asarray(phrase_scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] != len(region_boxes) or scores.shape[0] != len(gold_boxes):
        raise ValueError(
            f"scores {scores.shape} inconsistent with {len(gold_boxes)} phrases x {len(region_boxes)} regions"
        )
    out = []
    for h, gbox in enumerate(gold_boxes):
        gold = {t for t, rb in enumerate(region_boxes) if iou(rb, gbox) >= IOU_THRESHOLD}
        out.append(RankedList.from_scores(scores[h], gold))
    return out


def vqa_accuracy(predicted: int, gold: Sequence[int]) -> float:
    """``min(#annotators agreeing / 3, 1)``."""
    if len(gold) == 0:
        raise ValueError("empty gold answer multiset")
    return min(Counter(gold)[predicted] / 3.0, 1.0)
