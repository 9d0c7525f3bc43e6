/**
 * Subprocess plumbing for the voxdet backend.
 *
 * Every call spawns an independent `python -m voxdet` process working in
 * its own temporary directory, so concurrent calls never share state and
 * nothing blocks the Node event loop while the backend computes.
 */

import { execFile } from "node:child_process";
import { mkdtemp, rm, writeFile } from "node:fs/promises";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { promisify } from "node:util";

import { BackendError } from "./errors.js";

const execFileAsync = promisify(execFile);

/** Python interpreter used to run the backend; override via VOXDET_PYTHON. */
export const PYTHON: string = process.env.VOXDET_PYTHON ?? "python3";

export async function runVoxdet(args: string[]): Promise<string> {
  try {
    const { stdout } = await execFileAsync(PYTHON, ["-m", "voxdet", ...args], {
      maxBuffer: 1 << 28,
    });
    return stdout;
  } catch (err) {
    const e = err as { stderr?: string; message?: string };
    throw new BackendError(
      `voxdet ${args[0]} failed: ${e.stderr?.trim() || e.message || String(err)}`,
    );
  }
}

/** Run `body` with a private temp directory that is always cleaned up. */
export async function withTempDir<T>(
  body: (dir: string) => Promise<T>,
): Promise<T> {
  const dir = await mkdtemp(join(tmpdir(), "voxdet-bindings-"));
  try {
    return await body(dir);
  } finally {
    await rm(dir, { recursive: true, force: true });
  }
}

export async function writeJson(path: string, doc: unknown): Promise<void> {
  await writeFile(path, JSON.stringify(doc), "utf8");
}
