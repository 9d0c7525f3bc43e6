"""Greedy score-ordered non-maximum suppression for 3D detections.

Suppression is per label: a detection is dropped when a previously kept
detection of the same label overlaps it with IoU strictly greater than
the threshold. Ties in score keep input order, so the output is a
deterministic function of the input list.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box3, boxes_to_array, iou_matrix


@dataclass(frozen=True)
class Detection:
    box: Box3
    score: float
    label: int = 0

    def __post_init__(self):
        score = float(self.score)
        if not 0.0 <= score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {score}")
        object.__setattr__(self, "score", score)
        object.__setattr__(self, "label", int(self.label))


def nms(dets: Sequence[Detection], iou_threshold: float,
        max_out: int | None = None) -> list[Detection]:
    """Keep the highest-scoring detections, suppressing same-label overlap.

    Output is sorted by descending score (input order on ties) and
    truncated to ``max_out`` when given.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    if max_out is not None and max_out < 1:
        raise ValueError("max_out must be >= 1")
    if not dets:
        return []

    boxes = boxes_to_array([d.box for d in dets])
    scores = np.array([d.score for d in dets])
    labels = np.array([d.label for d in dets])
    order = np.lexsort((np.arange(len(dets)), -scores))

    kept: list[int] = []
    for i in order:
        if max_out is not None and len(kept) >= max_out:
            break
        same = [j for j in kept if labels[j] == labels[i]]
        if same:
            overlap = iou_matrix(boxes[i][None, :], boxes[same])[0]
            if (overlap > iou_threshold).any():
                continue
        kept.append(int(i))
    return [dets[i] for i in kept]
