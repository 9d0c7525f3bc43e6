/**
 * Batched box-regression losses, gradients and detection evaluation for
 * training loops, backed by the voxdet toolkit.
 *
 * Boxes cross the boundary in the center-size parameterization used by
 * detector regression heads: rows of `(cz, cy, cx, d, h, w)`, packed
 * row-major in a contiguous Float64Array (an N x 6 matrix). Gradients
 * come back the same way.
 *
 * These bindings never reimplement any numerics. Every call serializes
 * its inputs losslessly (shortest round-trip decimal on both sides, so
 * doubles survive bit for bit), invokes the toolkit's command-line
 * backend, and unpacks the structured reply. Batched results are
 * therefore exactly the numbers the core library produces; looping
 * single-row calls reproduces a batched call bitwise.
 *
 * All entry points are async and spawn independent backend processes, so
 * they may be called concurrently from worker threads or a single event
 * loop without shared state.
 */

import { join } from "node:path";

import { NonPositiveSizeError, ShapeMismatchError } from "./errors.js";
import { runVoxdet, withTempDir, writeJson } from "./runner.js";

export { BackendError, NonPositiveSizeError, ShapeMismatchError } from "./errors.js";
export { PYTHON } from "./runner.js";

export const ROW_WIDTH = 6;

/** Accepted batch forms: a packed row-major Float64Array or explicit rows. */
export type BatchBoxes = Float64Array | readonly (readonly number[])[];

export type Reduction = "mean" | "sum" | "none";

export interface BatchLossOptions {
  /** Reduction over pairs, applied to the values; gradients are returned
   * per row, scaled consistently (divided by N for `mean`). Default mean. */
  reduction?: Reduction;
}

export interface BatchLossResult {
  /** Per-pair loss values, length N. */
  values: Float64Array;
  /** Per-row gradients w.r.t. (cz, cy, cx, d, h, w), packed N x 6. */
  gradients: Float64Array;
  /** Reduced value; null for reduction "none". */
  reduced: number | null;
}

function packRows(input: BatchBoxes, name: string): Float64Array {
  let rows: Float64Array;
  if (input instanceof Float64Array) {
    if (input.length % ROW_WIDTH !== 0) {
      throw new ShapeMismatchError(
        `${name}: length ${input.length} is not a multiple of ${ROW_WIDTH}`,
      );
    }
    rows = input;
  } else {
    rows = new Float64Array(input.length * ROW_WIDTH);
    for (let i = 0; i < input.length; i++) {
      const row = input[i];
      if (row.length !== ROW_WIDTH) {
        throw new ShapeMismatchError(
          `${name}: row ${i} has ${row.length} entries, expected ${ROW_WIDTH}`,
        );
      }
      rows.set(row, i * ROW_WIDTH);
    }
  }
  const n = rows.length / ROW_WIDTH;
  for (let i = 0; i < n; i++) {
    for (let j = 0; j < ROW_WIDTH; j++) {
      const v = rows[i * ROW_WIDTH + j];
      if (!Number.isFinite(v)) {
        throw new ShapeMismatchError(`${name}: row ${i} holds non-finite ${v}`);
      }
      if (j >= 3 && v <= 0) {
        throw new NonPositiveSizeError(
          `${name}: row ${i} has size component ${v} <= 0`,
          i,
        );
      }
    }
  }
  return rows;
}

function toNested(rows: Float64Array): number[][] {
  const n = rows.length / ROW_WIDTH;
  const out: number[][] = new Array(n);
  for (let i = 0; i < n; i++) {
    out[i] = Array.from(rows.subarray(i * ROW_WIDTH, (i + 1) * ROW_WIDTH));
  }
  return out;
}

/**
 * Aspect-aware IoU regression loss (distance-IoU plus weighted
 * aspect-consistency penalty) over paired batches, with gradients.
 */
export async function batchVciou(
  pred: BatchBoxes,
  gt: BatchBoxes,
  options: BatchLossOptions = {},
): Promise<BatchLossResult> {
  return batchLoss("vciou", pred, gt, options);
}

/** Same boundary for the other kernels the backend exposes. */
export async function batchLoss(
  kind: "vciou" | "diou" | "smooth_l1",
  pred: BatchBoxes,
  gt: BatchBoxes,
  options: BatchLossOptions = {},
): Promise<BatchLossResult> {
  const reduction = options.reduction ?? "mean";
  const p = packRows(pred, "pred");
  const g = packRows(gt, "gt");
  if (p.length !== g.length) {
    throw new ShapeMismatchError(
      `pred and gt must pair rows: ${p.length / ROW_WIDTH} vs ${g.length / ROW_WIDTH}`,
    );
  }
  return withTempDir(async (dir) => {
    const predPath = join(dir, "pred.json");
    const gtPath = join(dir, "gt.json");
    await writeJson(predPath, toNested(p));
    await writeJson(gtPath, toNested(g));
    const stdout = await runVoxdet([
      "loss",
      "--pred-params", predPath,
      "--gt-params", gtPath,
      "--loss", kind,
      "--reduction", reduction,
      "--grad",
      "--format", "structured",
    ]);
    const doc = JSON.parse(stdout) as {
      values: number[];
      reduced: number | null;
      gradients: number[][];
    };
    const values = Float64Array.from(doc.values);
    const gradients = new Float64Array(doc.gradients.length * ROW_WIDTH);
    doc.gradients.forEach((row, i) => gradients.set(row, i * ROW_WIDTH));
    return { values, gradients, reduced: doc.reduced };
  });
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/** One scored box; `score` must be present on predictions and absent on
 * ground truth. Corners are (z1, y1, x1, z2, y2, x2) in voxels. */
export interface BoxRecord {
  box: readonly [number, number, number, number, number, number];
  label?: number;
  score?: number;
}

export interface Scan {
  scanId: string;
  /** Voxel spacing (z, y, x) in millimetres. */
  spacingMm: readonly [number, number, number];
  boxes: readonly BoxRecord[];
}

export interface ThresholdMetrics {
  iou_threshold: number;
  ap: number | null;
  ar: number | null;
  tp: number;
  fp: number;
  fn: number;
  n_gt: number;
  n_det: number;
}

export interface EvalReport {
  n_scans: number;
  n_gt: number;
  n_det: number;
  thresholds: ThresholdMetrics[];
  size_groups_cm3?: Record<string, ThresholdMetrics[]>;
  froc?: {
    iou_threshold: number;
    points: { fp_per_scan: number; sensitivity: number }[];
  }[];
}

export interface BatchEvalOptions {
  /** Per-scan detection cap entering average recall. Backend default 100. */
  maxDet?: number;
  /** cm^3 bin edges for size-stratified reporting. */
  sizeBinsCm3?: readonly number[];
  /** Also compute FROC curves at each threshold. */
  froc?: boolean;
}

function scanDocument(scan: Scan, requireScores: boolean): object {
  return {
    scan_id: scan.scanId,
    spacing_mm: Array.from(scan.spacingMm),
    boxes: scan.boxes.map((b, i) => {
      if (requireScores && typeof b.score !== "number") {
        throw new ShapeMismatchError(
          `scan ${scan.scanId}: prediction box ${i} has no score`,
        );
      }
      const row: Record<string, unknown> = {
        box: Array.from(b.box),
        label: b.label ?? 0,
      };
      if (typeof b.score === "number") row.score = b.score;
      return row;
    }),
  };
}

/**
 * Evaluate per-scan predictions against ground truth at the given IoU
 * thresholds. Numbers are exactly those of the toolkit's `eval` command on
 * equivalent files (this call writes those files and runs it).
 */
export async function batchEval(
  predictions: readonly Scan[],
  groundTruth: readonly Scan[],
  thresholds: readonly number[],
  options: BatchEvalOptions = {},
): Promise<EvalReport> {
  if (thresholds.length === 0) {
    throw new ShapeMismatchError("need at least one IoU threshold");
  }
  return withTempDir(async (dir) => {
    const predPaths: string[] = [];
    const gtPaths: string[] = [];
    for (let i = 0; i < predictions.length; i++) {
      const p = join(dir, `pred${i}.boxes`);
      await writeJson(p, scanDocument(predictions[i], true));
      predPaths.push(p);
    }
    for (let i = 0; i < groundTruth.length; i++) {
      const p = join(dir, `gt${i}.boxes`);
      await writeJson(p, scanDocument(groundTruth[i], false));
      gtPaths.push(p);
    }
    const args = [
      "eval",
      "--pred", ...predPaths,
      "--gt", ...gtPaths,
      "--iou", thresholds.join(","),
      "--format", "structured",
    ];
    if (options.maxDet !== undefined) {
      args.push("--max-det", String(options.maxDet));
    }
    if (options.sizeBinsCm3 !== undefined) {
      args.push("--size-bins", options.sizeBinsCm3.join(","));
    }
    if (options.froc) {
      args.push("--froc");
    }
    const stdout = await runVoxdet(args);
    return JSON.parse(stdout) as EvalReport;
  });
}
