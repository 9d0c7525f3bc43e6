"""Detection evaluation: AP/AR at IoU thresholds, FROC and size breakdowns.

Matching is greedy and one-to-one per scan: detections are visited in
descending score order (ties keep input order) and each takes the
unmatched same-label ground truth with the highest IoU, provided that IoU
reaches the threshold. A single detection never satisfies two ground
truths.

AP integrates the full precision envelope over recall (all-points
interpolation). AR is the recall of the matched set when each scan is
truncated to its ``max_det`` highest-scoring detections.

Ordering rule for equal scores, used everywhere flags are consumed:
within a scan, input order; across scans, the scan that appears first in
the input. Permuting equal-score detections is only guaranteed to
reproduce identical flags when this order is preserved.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DuplicateScanId, ZeroGroundTruth
from .geometry import Box3, boxes_to_array, iou_matrix, physical_volume_cm3
from .nms import Detection

DEFAULT_FP_AXIS = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
DEFAULT_MAX_DET = 100
DEFAULT_SIZE_BINS_CM3 = (1.0, 10.0, 50.0)


@dataclass(frozen=True)
class GroundTruth:
    box: Box3
    label: int = 0

    def __post_init__(self):
        object.__setattr__(self, "label", int(self.label))


@dataclass(frozen=True)
class DetRecord:
    """One scored detection with its match outcome."""

    scan_id: str
    det_index: int
    score: float
    is_tp: bool
    gt_index: int | None


@dataclass(frozen=True)
class ScanCounts:
    tp: int
    fp: int
    fn: int
    n_gt: int
    n_det: int


@dataclass
class MatchOutcome:
    """Match flags for a whole dataset at one IoU threshold."""

    iou_threshold: float
    records: list[DetRecord]          # sorted by (-score, scan order, det index)
    scan_ids: list[str]               # evaluation order (dets first, then gt-only)
    n_gt: int
    per_scan: dict[str, ScanCounts]

    @property
    def n_det(self) -> int:
        return len(self.records)

    @property
    def tp(self) -> int:
        return sum(r.is_tp for r in self.records)

    @property
    def fp(self) -> int:
        return self.n_det - self.tp

    @property
    def fn(self) -> int:
        return self.n_gt - self.tp


def _scan_map(items, what: str) -> dict[str, list]:
    if items is None:
        return {}
    if isinstance(items, Mapping):
        return {k: list(v) for k, v in items.items()}
    out: dict[str, list] = {}
    for scan_id, seq in items:
        if scan_id in out:
            raise DuplicateScanId(f"{what}: scan {scan_id!r} appears twice")
        out[scan_id] = list(seq)
    return out


def _match_one_scan(dets: Sequence[Detection], gts: Sequence[GroundTruth],
                    iou_t: float):
    """Greedy one-to-one matching inside one scan.

    Returns (order, flags, matched_gt) where order is the visiting order
    of detection indices.
    """
    scores = np.array([d.score for d in dets], dtype=np.float64)
    order = np.lexsort((np.arange(len(dets)), -scores))
    flags = np.zeros(len(dets), dtype=bool)
    matched_gt: list[int | None] = [None] * len(dets)
    if gts and dets:
        ious = iou_matrix(boxes_to_array([d.box for d in dets]),
                          boxes_to_array([g.box for g in gts]))
        same_label = np.array(
            [[d.label == g.label for g in gts] for d in dets], dtype=bool
        )
        ious = np.where(same_label, ious, 0.0)
        taken = np.zeros(len(gts), dtype=bool)
        for i in order:
            row = np.where(taken, -1.0, ious[i])
            j = int(row.argmax())
            if row[j] >= iou_t:
                taken[j] = True
                flags[i] = True
                matched_gt[i] = j
    return order, flags, matched_gt


def match_detections(dets, gts, iou_t: float) -> MatchOutcome:
    """Match all scans at one threshold and return globally sorted flags.

    ``dets`` and ``gts`` map scan id to detection / ground-truth lists
    (mappings, or iterables of (scan_id, list) pairs; duplicated scan ids
    raise :class:`DuplicateScanId`). Scans present on only one side are
    legal: missing detections mean false negatives, missing ground truth
    means every detection is a false positive.
    """
    if not 0.0 < iou_t <= 1.0:
        raise ValueError(f"iou threshold must be in (0, 1], got {iou_t}")
    det_map = _scan_map(dets, "detections")
    gt_map = _scan_map(gts, "ground truth")
    scan_ids = list(det_map)
    scan_ids.extend(s for s in gt_map if s not in det_map)

    records: list[tuple] = []
    per_scan: dict[str, ScanCounts] = {}
    n_gt_total = 0
    for pos, sid in enumerate(scan_ids):
        sdets = det_map.get(sid, [])
        sgts = gt_map.get(sid, [])
        n_gt_total += len(sgts)
        order, flags, matched = _match_one_scan(sdets, sgts, iou_t)
        tp = int(flags.sum())
        per_scan[sid] = ScanCounts(tp, len(sdets) - tp, len(sgts) - tp,
                                   len(sgts), len(sdets))
        for i in order:
            records.append((-sdets[i].score, pos, i,
                            DetRecord(sid, int(i), sdets[i].score,
                                      bool(flags[i]), matched[i])))

    records.sort(key=lambda r: (r[0], r[1], r[2]))
    return MatchOutcome(iou_t, [r[3] for r in records], scan_ids,
                        n_gt_total, per_scan)


def average_precision(records: Sequence, n_gt: int) -> float:
    """Area under the monotone precision envelope over recall.

    ``records`` may be DetRecords or plain booleans, already sorted by
    descending score.
    """
    if n_gt == 0:
        raise ZeroGroundTruth("average precision is undefined without ground truth")
    flags = np.array(
        [r.is_tp if isinstance(r, DetRecord) else bool(r) for r in records],
        dtype=bool,
    )
    if flags.size == 0:
        return 0.0
    tp_cum = np.cumsum(flags)
    precision = tp_cum / np.arange(1, flags.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # every TP advances recall by exactly 1/n_gt
    return float(envelope[flags].sum() / n_gt)


def average_recall(outcome: MatchOutcome, max_det: int = DEFAULT_MAX_DET) -> float:
    """Recall of the matched set at ``max_det`` detections per scan."""
    if outcome.n_gt == 0:
        raise ZeroGroundTruth("average recall is undefined without ground truth")
    if max_det < 1:
        raise ValueError("max_det must be >= 1")
    rank: dict[str, int] = {}
    tp = 0
    for r in outcome.records:
        seen = rank.get(r.scan_id, 0)
        if seen < max_det:
            rank[r.scan_id] = seen + 1
            tp += r.is_tp
    return tp / outcome.n_gt


@dataclass(frozen=True)
class FrocPoint:
    fp_per_scan: float
    sensitivity: float


@dataclass
class FrocResult:
    """Sensitivity at the requested FP/scan budgets plus the raw curve."""

    iou_threshold: float
    points: list[FrocPoint]  # at the requested fp axis
    curve: list[FrocPoint]   # empirical operating points, threshold high to low

    def mean_sensitivity(self) -> float:
        return float(np.mean([p.sensitivity for p in self.points]))


def froc(dets, gts, iou_t: float, fp_axis: Sequence[float] | None = None,
         outcome: MatchOutcome | None = None) -> FrocResult:
    """Sweep the score threshold and read sensitivity at FP/scan budgets.

    The empirical curve holds one operating point per distinct score; the
    requested points use step interpolation (the best sensitivity whose
    mean FP/scan does not exceed the budget).
    """
    axis = tuple(fp_axis) if fp_axis is not None else DEFAULT_FP_AXIS
    if any(f <= 0 for f in axis) or list(axis) != sorted(axis):
        raise ValueError("fp axis must be positive and ascending")
    if outcome is None:
        outcome = match_detections(dets, gts, iou_t)
    if outcome.n_gt == 0:
        raise ZeroGroundTruth("FROC is undefined without ground truth")
    n_scans = max(len(outcome.scan_ids), 1)

    curve = [FrocPoint(0.0, 0.0)]
    tp = fp = 0
    recs = outcome.records
    i = 0
    while i < len(recs):
        j = i
        while j < len(recs) and recs[j].score == recs[i].score:
            tp += recs[j].is_tp
            fp += not recs[j].is_tp
            j += 1
        curve.append(FrocPoint(fp / n_scans, tp / outcome.n_gt))
        i = j

    points = []
    for budget in axis:
        sens = 0.0
        for p in curve:
            if p.fp_per_scan <= budget:
                sens = max(sens, p.sensitivity)
        points.append(FrocPoint(budget, sens))
    return FrocResult(iou_t, points, curve)


# ---------------------------------------------------------------------------
# Size-stratified evaluation
# ---------------------------------------------------------------------------

def _format_edge(edge: float) -> str:
    return f"{edge:g}"


def size_group_labels(bins_cm3: Sequence[float]) -> list[str]:
    edges = [float(e) for e in bins_cm3]
    if not edges or any(e <= 0 for e in edges) or edges != sorted(edges):
        raise ValueError("size bins must be positive and ascending")
    labels = [f"<{_format_edge(edges[0])}"]
    for lo, hi in zip(edges, edges[1:]):
        labels.append(f"{_format_edge(lo)}-{_format_edge(hi)}")
    labels.append(f">={_format_edge(edges[-1])}")
    return labels


def size_group_of(volume_cm3: float, bins_cm3: Sequence[float]) -> int:
    """Index of the half-open bin [edge_i, edge_i+1) holding this volume."""
    idx = 0
    for edge in bins_cm3:
        if volume_cm3 >= edge:
            idx += 1
    return idx


@dataclass(frozen=True)
class ThresholdMetrics:
    """AP/AR and match counts at one IoU threshold (None = undefined)."""

    iou_threshold: float
    ap: float | None
    ar: float | None
    tp: int
    fp: int
    fn: int
    n_gt: int
    n_det: int

    def to_dict(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "ap": self.ap,
            "ar": self.ar,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "n_gt": self.n_gt,
            "n_det": self.n_det,
        }


def _metrics_from_records(iou_t, records, n_gt, max_det) -> ThresholdMetrics:
    tp = sum(r.is_tp for r in records)
    ap = ar = None
    if n_gt > 0:
        ap = average_precision(records, n_gt)
        rank: dict[str, int] = {}
        tp_top = 0
        for r in records:
            seen = rank.get(r.scan_id, 0)
            if seen < max_det:
                rank[r.scan_id] = seen + 1
                tp_top += r.is_tp
        ar = tp_top / n_gt
    return ThresholdMetrics(iou_t, ap, ar, tp, len(records) - tp,
                            n_gt - tp, n_gt, len(records))


def size_stratified(dets, gts, iou_t: float, bins_cm3: Sequence[float],
                    spacings: Mapping[str, Sequence[float]],
                    max_det: int = DEFAULT_MAX_DET) -> dict[str, ThresholdMetrics]:
    """Evaluate each physical-size group with out-of-group gts ignored.

    Matching runs once against all ground truths; inside a group's report,
    detections matched to a ground truth of another group are dropped
    entirely (they are neither TP nor FP there), mirroring the usual
    area-range evaluation convention.
    """
    labels = size_group_labels(bins_cm3)
    gt_map = _scan_map(gts, "ground truth")
    outcome = match_detections(dets, gt_map, iou_t)

    group_of: dict[tuple[str, int], int] = {}
    group_n_gt = [0] * len(labels)
    for sid, sgts in gt_map.items():
        if sgts and sid not in spacings:
            raise ValueError(f"no voxel spacing provided for scan {sid!r}")
        for gi, g in enumerate(sgts):
            vol = physical_volume_cm3(g.box, spacings[sid])
            grp = size_group_of(vol, bins_cm3)
            group_of[(sid, gi)] = grp
            group_n_gt[grp] += 1

    out: dict[str, ThresholdMetrics] = {}
    for grp, label in enumerate(labels):
        kept = []
        for r in outcome.records:
            if r.is_tp and group_of[(r.scan_id, r.gt_index)] != grp:
                continue  # ignored: matched a gt outside this group
            kept.append(r)
        out[label] = _metrics_from_records(iou_t, kept, group_n_gt[grp], max_det)
    return out


# ---------------------------------------------------------------------------
# Composite report
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    thresholds: list[ThresholdMetrics]
    n_scans: int
    n_gt: int
    n_det: int
    size_groups: dict[str, list[ThresholdMetrics]] | None = None
    froc: list[FrocResult] | None = None

    def to_dict(self) -> dict:
        doc: dict = {
            "n_scans": self.n_scans,
            "n_gt": self.n_gt,
            "n_det": self.n_det,
            "thresholds": [t.to_dict() for t in self.thresholds],
        }
        if self.size_groups is not None:
            doc["size_groups_cm3"] = {
                label: [t.to_dict() for t in ts]
                for label, ts in self.size_groups.items()
            }
        if self.froc is not None:
            doc["froc"] = [
                {
                    "iou_threshold": f.iou_threshold,
                    "points": [
                        {"fp_per_scan": p.fp_per_scan, "sensitivity": p.sensitivity}
                        for p in f.points
                    ],
                }
                for f in self.froc
            ]
        return doc

    def format_table(self) -> str:
        def fmt(x):
            return "absent" if x is None else f"{x:.4f}"

        lines = [f"scans: {self.n_scans}  gt: {self.n_gt}  det: {self.n_det}"]
        lines.append("iou_t     AP        AR        TP    FP    FN")
        for t in self.thresholds:
            lines.append(
                f"{t.iou_threshold:<8.2f}  {fmt(t.ap):<8}  {fmt(t.ar):<8}  "
                f"{t.tp:<4d}  {t.fp:<4d}  {t.fn:<4d}"
            )
        if self.size_groups:
            lines.append("")
            lines.append("size group (cm^3) breakdown")
            for label, ts in self.size_groups.items():
                for t in ts:
                    lines.append(
                        f"  {label:<8} iou {t.iou_threshold:<5.2f} "
                        f"AP {fmt(t.ap):<8} AR {fmt(t.ar):<8} "
                        f"gt {t.n_gt:<4d} tp {t.tp:<4d} fp {t.fp:<4d}"
                    )
        if self.froc:
            lines.append("")
            for f in self.froc:
                lines.append(f"FROC at iou {f.iou_threshold:g} (fp/scan, sensitivity)")
                for p in f.points:
                    lines.append(f"  {p.fp_per_scan:<8g} {p.sensitivity:.4f}")
        return "\n".join(lines)


def evaluate(dets, gts, thresholds: Sequence[float],
             max_det: int = DEFAULT_MAX_DET,
             size_bins_cm3: Sequence[float] | None = None,
             spacings: Mapping[str, Sequence[float]] | None = None,
             fp_axis: Sequence[float] | None = None,
             with_froc: bool = False) -> EvalReport:
    """Run the full evaluation at each requested IoU threshold."""
    det_map = _scan_map(dets, "detections")
    gt_map = _scan_map(gts, "ground truth")
    if not thresholds:
        raise ValueError("need at least one IoU threshold")

    per_t: list[ThresholdMetrics] = []
    frocs: list[FrocResult] = []
    n_scans = n_det = n_gt = 0
    for t in thresholds:
        outcome = match_detections(det_map, gt_map, t)
        n_scans = len(outcome.scan_ids)
        n_det = outcome.n_det
        n_gt = outcome.n_gt
        per_t.append(_metrics_from_records(t, outcome.records, n_gt, max_det))
        if with_froc and n_gt > 0:
            frocs.append(froc(det_map, gt_map, t, fp_axis, outcome=outcome))

    groups = None
    if size_bins_cm3 is not None:
        if spacings is None:
            raise ValueError("size stratification needs per-scan voxel spacings")
        groups = {}
        for t in thresholds:
            for label, tm in size_stratified(det_map, gt_map, t, size_bins_cm3,
                                             spacings, max_det).items():
                groups.setdefault(label, []).append(tm)

    return EvalReport(per_t, n_scans, n_gt, n_det, groups,
                      frocs if with_froc else None)
