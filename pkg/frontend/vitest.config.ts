import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["tests/**/*.test.ts"],
    testTimeout: 600_000,
    hookTimeout: 600_000,
    // artifact builds are cached on disk; keep tests in one worker
    pool: "forks",
    poolOptions: { forks: { singleFork: true } },
  },
});
