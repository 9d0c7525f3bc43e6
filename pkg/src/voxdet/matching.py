"""Adaptive ground-truth-to-anchor assignment and hard-negative mining.

The matcher follows the adaptive candidate-statistics scheme: for every
ground truth, the ``top_k`` anchors per pyramid level closest by center
distance form the candidate pool; the positivity threshold is the mean of
the candidate IoUs plus their population standard deviation; candidates at
or above the threshold whose center lies strictly inside the ground truth
become positives. Everything else is negative. No ignore band is emitted
here (anchors overlapping a ground truth but failing containment count as
plain negatives).

All tie-breaks are deterministic: equal center distances prefer the lower
anchor index, an anchor claimed by several ground truths resolves to the
highest IoU and then the lower ground-truth index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .anchors import AnchorGrid
from .geometry import Box3, boxes_to_array, iou_matrix

NEGATIVE = -1
IGNORED = -2


@dataclass(frozen=True)
class GtMatchStats:
    """Per-ground-truth matching diagnostics."""

    gt_index: int
    n_candidates: int
    iou_mean: float
    iou_std: float
    threshold: float
    n_positives: int


@dataclass
class MatchResult:
    """Per-anchor labels: matched gt index, NEGATIVE or IGNORED."""

    labels: np.ndarray
    stats: list[GtMatchStats]

    @property
    def n_anchors(self) -> int:
        return int(self.labels.shape[0])

    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)

    def zero_positive_gts(self) -> list[int]:
        return [s.gt_index for s in self.stats if s.n_positives == 0]


def atss_match(grid: AnchorGrid, gts: Sequence[Box3], top_k: int = 9) -> MatchResult:
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    n = len(grid)
    if n == 0:
        raise ValueError("anchor grid is empty")

    labels = np.full(n, NEGATIVE, dtype=np.int64)
    claim_iou = np.full(n, -1.0)
    stats: list[GtMatchStats] = []

    gt_rows = boxes_to_array(gts)
    for gi, gt in enumerate(gts):
        center = np.asarray(gt.center)
        d2 = ((grid.centers - center) ** 2).sum(axis=1)

        cand_parts = []
        for start, stop in grid.level_slices:
            take = min(top_k, stop - start)
            order = np.argsort(d2[start:stop], kind="stable")[:take]
            cand_parts.append(order + start)
        cand = np.concatenate(cand_parts)

        ious = iou_matrix(grid.boxes[cand], gt_rows[gi][None, :])[:, 0]
        mean = float(ious.mean())
        std = float(ious.std())
        threshold = mean + std

        inside = (
            (grid.centers[cand] > np.asarray(gt.min)).all(axis=1)
            & (grid.centers[cand] < np.asarray(gt.max)).all(axis=1)
        )
        keep = (ious >= threshold) & inside
        pos = cand[keep]
        pos_iou = ious[keep]

        # Multi-gt conflicts: strictly higher IoU wins, ties keep the
        # earlier (lower-index) ground truth.
        for a, io in zip(pos, pos_iou):
            if io > claim_iou[a]:
                claim_iou[a] = io
                labels[a] = gi

        stats.append(GtMatchStats(gi, int(cand.shape[0]), mean, std,
                                  threshold, int(pos.shape[0])))

    # n_positives in stats counts an anchor for every gt that claimed it;
    # recount after conflict resolution so the numbers describe the final
    # assignment.
    final_counts = np.bincount(labels[labels >= 0], minlength=len(gts))
    stats = [
        GtMatchStats(s.gt_index, s.n_candidates, s.iou_mean, s.iou_std,
                     s.threshold, int(final_counts[s.gt_index]))
        for s in stats
    ]
    return MatchResult(labels, stats)


def sample_hard_negatives(match: MatchResult, scores, ratio: float = 3.0,
                          cap: int = 256) -> np.ndarray:
    """Pick the highest-scoring negative anchors.

    The selection size is ``min(cap, floor(ratio * n_positives))``, or
    ``cap`` when there are no positives at all (pure-negative scans still
    need negative samples), always limited by the number of negatives.
    Ties in score break toward the lower anchor index. Returns indices in
    descending-score order.
    """
    if ratio <= 0:
        raise ValueError("ratio must be > 0")
    if cap < 1:
        raise ValueError("cap must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (match.n_anchors,):
        raise ValueError(
            f"scores must have shape ({match.n_anchors},), got {scores.shape}"
        )
    negatives = np.flatnonzero(match.labels == NEGATIVE)
    n_pos = int((match.labels >= 0).sum())
    want = cap if n_pos == 0 else min(cap, int(ratio * n_pos))
    count = min(want, negatives.shape[0])
    if count <= 0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((negatives, -scores[negatives]))
    return negatives[order[:count]]
