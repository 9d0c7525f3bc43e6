import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    // the per-pair consistency test spawns 1000 backend processes
    testTimeout: 600_000,
    hookTimeout: 60_000,
  },
});
