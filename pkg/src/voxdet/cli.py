"""Command-line surface tying the toolkit together.

Exit codes: 0 on success, 1 on a domain error (bad file content, invalid
geometry, undefined metric), 2 on a usage error. ``--format structured``
switches reports from human-readable tables to JSON. All outputs are
deterministic functions of inputs and flags.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import anchors as anchors_mod
from . import annotation, geometry, losses, matching, metrics, volio
from .errors import DuplicateScanId, NonDifferentiablePoint, VoxdetError
from .geometry import Box3, VolumeMeta
from .losses import BoxParam
from .metrics import GroundTruth
from .nms import Detection, nms as run_nms


def _parse_floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t]


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t)


def _emit(doc: dict, table: str, fmt: str) -> None:
    if fmt == "structured":
        print(json.dumps(doc, indent=2))
    else:
        print(table)


def _load_scans(paths, *, role: str):
    """Read several box files into {scan_id: (path, ScanBoxes)}."""
    out: dict[str, tuple[str, volio.ScanBoxes]] = {}
    for path in paths:
        scan = volio.read_boxes(path)
        if scan.scan_id in out:
            raise DuplicateScanId(f"{role}: scan {scan.scan_id!r} appears twice "
                                  f"(second time in {path})")
        out[scan.scan_id] = (str(path), scan)
    return out


def _detections_of(scan: volio.ScanBoxes, path) -> list[Detection]:
    scan.require_scores(path)
    return [Detection(e.box, e.score, e.label) for e in scan.entries]


def _ground_truths_of(scan: volio.ScanBoxes) -> list[GroundTruth]:
    # Scores on ground-truth inputs are tolerated and ignored so that a
    # detection file can be evaluated against itself.
    return [GroundTruth(e.box, e.label) for e in scan.entries]


def _params_from_file(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        rows = json.load(fh)
    return np.asarray(rows, dtype=np.float64)


def _params_from_scan(scan: volio.ScanBoxes) -> np.ndarray:
    if not scan.entries:
        return np.empty((0, 6), dtype=np.float64)
    return np.stack([
        BoxParam.from_box3(e.box).as_row()[0] for e in scan.entries
    ])


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_iou(args) -> int:
    a = volio.read_boxes(args.a)
    b = volio.read_boxes(args.b)
    if len(a.entries) != len(b.entries):
        raise VoxdetError(
            f"files pair boxes by index but hold {len(a.entries)} vs "
            f"{len(b.entries)} boxes"
        )
    values = [geometry.iou(x.box, y.box) for x, y in zip(a.entries, b.entries)]
    mean = float(np.mean(values)) if values else None
    doc = {"pairs": [{"index": i, "iou": v} for i, v in enumerate(values)],
           "mean_iou": mean}
    lines = [f"{i:<6d} {v:.6f}" for i, v in enumerate(values)]
    lines.append(f"mean   {mean:.6f}" if mean is not None else "mean   absent")
    _emit(doc, "\n".join(lines), args.format)
    return 0


def _cmd_loss(args) -> int:
    if args.pred_params or args.gt_params:
        if not (args.pred_params and args.gt_params):
            raise VoxdetError("--pred-params and --gt-params go together")
        pred = _params_from_file(args.pred_params)
        gt = _params_from_file(args.gt_params)
    else:
        if not (args.pred and args.gt):
            raise VoxdetError("need --pred/--gt files or --pred-params/--gt-params")
        pred = _params_from_scan(volio.read_boxes(args.pred))
        gt = _params_from_scan(volio.read_boxes(args.gt))
    res = losses.batch_loss(args.loss, pred, gt, beta=args.beta,
                            reduction=args.reduction, with_grad=args.grad)
    doc: dict = {
        "loss": args.loss,
        "reduction": args.reduction,
        "values": [float(v) for v in res.values],
        "reduced": res.reduced,
    }
    if args.grad:
        doc["gradients"] = [[float(g) for g in row] for row in res.gradients]
    lines = [f"{args.loss} per-pair values ({len(res.values)} pairs)"]
    lines += [f"{i:<6d} {v:.9g}" for i, v in enumerate(res.values)]
    if res.reduced is not None:
        lines.append(f"{args.reduction}   {res.reduced:.9g}")
    _emit(doc, "\n".join(lines), args.format)
    return 0


def _sample_pair(rng) -> tuple[BoxParam, BoxParam]:
    gt_center = rng.uniform(-5.0, 5.0, size=3)
    gt_size = rng.uniform(1.0, 10.0, size=3)
    pred_center = gt_center + rng.uniform(-0.3, 0.3, size=3) * gt_size
    pred_size = gt_size * rng.uniform(0.7, 1.4, size=3)
    return (BoxParam(tuple(pred_center), tuple(pred_size)),
            BoxParam(tuple(gt_center), tuple(gt_size)))


def random_overlapping_pairs(n: int, seed: int = 0,
                             min_iou: float = 0.05) -> list[tuple[BoxParam, BoxParam]]:
    """Random non-degenerate overlapping pairs for gradient verification."""
    rng = np.random.default_rng(seed)
    pairs = []
    while len(pairs) < n:
        pred, gt = _sample_pair(rng)
        if geometry.iou(pred.to_box3(), gt.to_box3()) >= min_iou:
            pairs.append((pred, gt))
    return pairs


def _cmd_grad_check(args) -> int:
    kinds = losses.LOSS_KINDS if args.loss == "all" else (args.loss,)
    pairs = random_overlapping_pairs(args.pairs, args.seed)
    rows = []
    for kind in kinds:
        worst = 0.0
        skipped = 0
        for pred, gt in pairs:
            try:
                err = losses.gradient_check(kind, pred, gt, args.step,
                                            beta=args.beta)
            except NonDifferentiablePoint:
                skipped += 1
                continue
            worst = max(worst, err)
        rows.append({"loss": kind, "pairs": len(pairs) - skipped,
                     "skipped_kinks": skipped, "max_rel_error": worst})
    table = ["loss       pairs  kinks  max rel error"]
    table += [
        f"{r['loss']:<9}  {r['pairs']:<5d}  {r['skipped_kinks']:<5d}  "
        f"{r['max_rel_error']:.3e}"
        for r in rows
    ]
    _emit({"step": args.step, "results": rows}, "\n".join(table), args.format)
    return 0


def _volume_meta(args) -> VolumeMeta:
    return VolumeMeta(_parse_ints(args.shape), tuple(_parse_floats(args.spacing)))


def _cmd_anchors_gen(args) -> int:
    config = anchors_mod.load_anchor_config(args.config)
    volume = _volume_meta(args)
    schedule = anchors_mod.schedule_from_config(config, volume)
    grid = anchors_mod.generate_anchors(schedule, volume)
    levels = []
    for spec, cells, (start, stop) in zip(grid.levels, grid.cells,
                                          grid.level_slices):
        levels.append({
            "level": spec.level_id,
            "stride": list(spec.stride),
            "cells": list(cells),
            "family": len(spec.shapes),
            "anchors": stop - start,
        })
    doc = {"volume_shape": list(volume.shape), "total_anchors": len(grid),
           "levels": levels}
    table = ["level  stride        cells            k    anchors"]
    for lv in levels:
        table.append(
            f"{lv['level']:<5}  {str(lv['stride']):<12}  "
            f"{str(lv['cells']):<15}  {lv['family']:<3d}  {lv['anchors']}"
        )
    table.append(f"total  {len(grid)}")
    if args.out_boxes:
        scan = volio.ScanBoxes("anchors", volume.spacing_mm, [
            volio.BoxEntry(b, 0, None) for b in grid.boxes_list()
        ])
        volio.write_boxes(scan, args.out_boxes)
    _emit(doc, "\n".join(table), args.format)
    return 0


def _cmd_anchors_fit(args) -> int:
    boxes: list[Box3] = []
    for path in args.boxes:
        boxes.extend(volio.read_boxes(path).boxes())
    fit = anchors_mod.fit_anchors(boxes, args.k, args.iters, args.seed)
    strides = anchors_mod.cumulative_strides()
    levels = tuple((lv, strides[lv]) for lv in anchors_mod.DETECTION_LEVELS)
    config = anchors_mod.AnchorConfig(fit.shapes, args.scale_mode, levels)
    if args.out:
        anchors_mod.save_anchor_config(config, args.out)
    doc = {
        "k": args.k,
        "mean_best_iou": fit.mean_best_iou,
        "iterations": fit.iterations,
        "reseeds": fit.reseeds,
        "shapes_dhw": [list(s) for s in fit.shapes],
    }
    table = [f"fitted {args.k} shapes from {len(boxes)} boxes "
             f"in {fit.iterations} iterations"]
    table += [f"  ({s[0]:.3f}, {s[1]:.3f}, {s[2]:.3f})" for s in fit.shapes]
    table.append(f"mean best IoU: {fit.mean_best_iou:.4f}")
    _emit(doc, "\n".join(table), args.format)
    return 0


def _cmd_match(args) -> int:
    gt_scan = volio.read_boxes(args.gt)
    volume = VolumeMeta(_parse_ints(args.shape), gt_scan.spacing_mm)
    config = anchors_mod.load_anchor_config(args.config)
    schedule = anchors_mod.schedule_from_config(config, volume)
    grid = anchors_mod.generate_anchors(schedule, volume)
    result = matching.atss_match(grid, gt_scan.boxes(), args.top_k)
    stats = [
        {
            "gt_index": s.gt_index,
            "candidates": s.n_candidates,
            "iou_mean": s.iou_mean,
            "iou_std": s.iou_std,
            "threshold": s.threshold,
            "positives": s.n_positives,
        }
        for s in result.stats
    ]
    doc = {
        "anchors": result.n_anchors,
        "positives": int(len(result.positive_indices())),
        "zero_positive_gts": result.zero_positive_gts(),
        "per_gt": stats,
    }
    table = ["gt     cand   threshold   positives"]
    table += [
        f"{s['gt_index']:<5d}  {s['candidates']:<5d}  {s['threshold']:<9.4f}   "
        f"{s['positives']}"
        for s in stats
    ]
    table.append(f"total positives: {doc['positives']} / {result.n_anchors} anchors")
    _emit(doc, "\n".join(table), args.format)
    return 0


def _cmd_nms(args) -> int:
    scan = volio.read_boxes(args.pred)
    dets = _detections_of(scan, args.pred)
    kept = run_nms(dets, args.iou_threshold, args.max_out)
    if args.out:
        out_scan = volio.ScanBoxes(scan.scan_id, scan.spacing_mm, [
            volio.BoxEntry(d.box, d.label, d.score) for d in kept
        ])
        volio.write_boxes(out_scan, args.out)
    doc = {
        "kept": len(kept),
        "suppressed": len(dets) - len(kept),
        "detections": [
            {"box": list(d.box.min + d.box.max), "score": d.score,
             "label": d.label}
            for d in kept
        ],
    }
    _emit(doc, f"kept {len(kept)} of {len(dets)} detections", args.format)
    return 0


def _collect_eval_inputs(args):
    pred_scans = _load_scans(args.pred, role="pred")
    gt_scans = _load_scans(args.gt, role="gt")
    dets = {sid: _detections_of(s, path) for sid, (path, s) in pred_scans.items()}
    gts = {sid: _ground_truths_of(s) for sid, (_, s) in gt_scans.items()}
    spacings = {sid: s.spacing_mm for sid, (_, s) in gt_scans.items()}
    for sid, (path, scan) in pred_scans.items():
        if sid in gt_scans and scan.spacing_mm != gt_scans[sid][1].spacing_mm:
            raise VoxdetError(
                f"{path}: scan {sid!r} pred spacing {scan.spacing_mm} disagrees "
                f"with gt spacing {gt_scans[sid][1].spacing_mm}"
            )
    return dets, gts, spacings


def _cmd_eval(args) -> int:
    dets, gts, spacings = _collect_eval_inputs(args)
    thresholds = _parse_floats(args.iou)
    bins = _parse_floats(args.size_bins) if args.size_bins else None
    report = metrics.evaluate(
        dets, gts, thresholds, max_det=args.max_det,
        size_bins_cm3=bins, spacings=spacings if bins else None,
        fp_axis=_parse_floats(args.fp_axis) if args.fp_axis else None,
        with_froc=args.froc,
    )
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2)
            fh.write("\n")
    _emit(report.to_dict(), report.format_table(), args.format)
    return 0


def _cmd_froc(args) -> int:
    dets, gts, _ = _collect_eval_inputs(args)
    axis = _parse_floats(args.fp_axis) if args.fp_axis else None
    result = metrics.froc(dets, gts, args.iou, axis)
    doc = {
        "iou_threshold": result.iou_threshold,
        "points": [
            {"fp_per_scan": p.fp_per_scan, "sensitivity": p.sensitivity}
            for p in result.points
        ],
        "curve": [
            {"fp_per_scan": p.fp_per_scan, "sensitivity": p.sensitivity}
            for p in result.curve
        ],
    }
    # plot-ready two-column output
    table = "\n".join(f"{p.fp_per_scan:g}\t{p.sensitivity:.6f}"
                      for p in result.points)
    _emit(doc, table, args.format)
    return 0


def _cmd_mask2boxes(args) -> int:
    label_map = volio.read_volume(args.volume)
    comps = annotation.mask_to_boxes(label_map, args.connectivity)
    if args.out:
        scan = volio.ScanBoxes(Path(args.volume).stem, label_map.meta.spacing_mm,
                               [volio.BoxEntry(c.box, c.label, None)
                                for c in comps])
        volio.write_boxes(scan, args.out)
    doc = {
        "components": [
            {"box": list(c.box.min + c.box.max), "label": c.label,
             "voxel_count": c.voxel_count}
            for c in comps
        ]
    }
    lines = [f"{len(comps)} components"]
    lines += [
        f"  label {c.label} voxels {c.voxel_count} box {c.box.min}-{c.box.max}"
        for c in comps
    ]
    _emit(doc, "\n".join(lines), args.format)
    return 0


def _cmd_noise(args) -> int:
    scan = volio.read_boxes(args.boxes)
    spec = annotation.NoiseSpec(
        mode=args.mode,
        magnitude=args.magnitude,
        drop_rates=tuple(_parse_floats(args.drop_rates)),
        drop_bins_cm3=tuple(_parse_floats(args.drop_bins)),
        seed=args.seed,
    )
    result = annotation.corrupt_boxes(scan.boxes(), spec, scan.spacing_mm)
    if args.out:
        entries = [
            volio.BoxEntry(box, scan.entries[i].label, scan.entries[i].score)
            for i, box in zip(result.kept_indices, result.boxes)
        ]
        volio.write_boxes(volio.ScanBoxes(scan.scan_id, scan.spacing_mm, entries),
                          args.out)
    doc = {
        "mode": spec.mode,
        "seed": spec.seed,
        "boxes_in": len(scan.entries),
        "boxes_out": len(result.boxes),
        "dropped": result.dropped,
        "clamped": result.clamped,
        "mean_iou": result.mean_iou,
    }
    mean = "absent" if result.mean_iou is None else f"{result.mean_iou!r}"
    table = (f"{spec.mode}: {len(result.boxes)} of {len(scan.entries)} boxes kept, "
             f"mean IoU vs originals {mean}, clamped {result.clamped}")
    _emit(doc, table, args.format)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_format(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=("table", "structured"), default="table")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxdet",
        description="3D voxel detection geometry and evaluation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("iou", help="pairwise IoU between two box files")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    _add_format(p)
    p.set_defaults(func=_cmd_iou)

    p = sub.add_parser("loss", help="evaluate a box-regression loss over pairs")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--pred-params", help="JSON file of (cz,cy,cx,d,h,w) rows")
    p.add_argument("--gt-params")
    p.add_argument("--loss", choices=losses.LOSS_KINDS, default="vciou")
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--reduction", choices=losses.REDUCTIONS, default="mean")
    p.add_argument("--grad", action="store_true")
    _add_format(p)
    p.set_defaults(func=_cmd_loss)

    p = sub.add_parser("grad-check",
                       help="compare analytic gradients to finite differences")
    p.add_argument("--loss", choices=losses.LOSS_KINDS + ("all",), default="all")
    p.add_argument("--pairs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--beta", type=float, default=1.0)
    _add_format(p)
    p.set_defaults(func=_cmd_grad_check)

    p = sub.add_parser("anchors", help="anchor grid tools")
    asub = p.add_subparsers(dest="anchors_command", required=True)

    pg = asub.add_parser("gen", help="tile an anchor family over a volume")
    pg.add_argument("--config", required=True)
    pg.add_argument("--shape", required=True, help="Z,Y,X voxels")
    pg.add_argument("--spacing", required=True, help="Z,Y,X mm")
    pg.add_argument("--out-boxes")
    _add_format(pg)
    pg.set_defaults(func=_cmd_anchors_gen)

    pf = asub.add_parser("fit", help="fit an anchor family to a box corpus")
    pf.add_argument("--boxes", nargs="+", required=True)
    pf.add_argument("--k", type=int, required=True)
    pf.add_argument("--iters", type=int, default=25)
    pf.add_argument("--seed", type=int, default=0)
    pf.add_argument("--scale-mode", choices=anchors_mod.SCALE_MODES,
                    default="rescale")
    pf.add_argument("--out")
    _add_format(pf)
    pf.set_defaults(func=_cmd_anchors_fit)

    p = sub.add_parser("match", help="assign ground truths to anchors")
    p.add_argument("--config", required=True)
    p.add_argument("--shape", required=True, help="Z,Y,X voxels")
    p.add_argument("--gt", required=True)
    p.add_argument("--top-k", type=int, default=9)
    _add_format(p)
    p.set_defaults(func=_cmd_match)

    p = sub.add_parser("nms", help="suppress overlapping detections")
    p.add_argument("--pred", required=True)
    p.add_argument("--iou-threshold", type=float, default=0.1)
    p.add_argument("--max-out", type=int)
    p.add_argument("--out")
    _add_format(p)
    p.set_defaults(func=_cmd_nms)

    p = sub.add_parser("eval", help="AP/AR evaluation over scans")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--gt", nargs="+", required=True)
    p.add_argument("--iou", default="0.1,0.3")
    p.add_argument("--max-det", type=int, default=metrics.DEFAULT_MAX_DET)
    p.add_argument("--size-bins", help="cm^3 bin edges, e.g. 1,10,50")
    p.add_argument("--froc", action="store_true")
    p.add_argument("--fp-axis")
    p.add_argument("--out", help="also write the structured report to a file")
    _add_format(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("froc", help="sensitivity against FP/scan budgets")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--gt", nargs="+", required=True)
    p.add_argument("--iou", type=float, default=0.1)
    p.add_argument("--fp-axis")
    _add_format(p)
    p.set_defaults(func=_cmd_froc)

    p = sub.add_parser("mask2boxes", help="boxes of connected label components")
    p.add_argument("--volume", required=True)
    p.add_argument("--connectivity", type=int, choices=(6, 26), default=26)
    p.add_argument("--out")
    _add_format(p)
    p.set_defaults(func=_cmd_mask2boxes)

    p = sub.add_parser("noise", help="corrupt annotation boxes reproducibly")
    p.add_argument("--boxes", required=True)
    p.add_argument("--mode", choices=annotation.NOISE_MODES, required=True)
    p.add_argument("--magnitude", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--drop-rates", default="0.2,0.1")
    p.add_argument("--drop-bins", default="1,10")
    p.add_argument("--out")
    _add_format(p)
    p.set_defaults(func=_cmd_noise)

    return parser


def cli_dispatch(argv=None) -> int:
    """Parse argv and run the subcommand; domain errors return exit code 1."""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (VoxdetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
