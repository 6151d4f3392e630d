/** Bridge to the `medtok` command-line interface. */

import { spawnSync } from "node:child_process";

export class CliError extends Error {}

/**
 * Command used to reach the tokenizer CLI. Override with MEDTOK_CLI
 * (whitespace-separated), e.g. "medtok" or "python3 -m medtok".
 */
export function cliCommand(): string[] {
  const env = process.env.MEDTOK_CLI;
  if (env && env.trim()) {
    return env.trim().split(/\s+/);
  }
  return ["python3", "-m", "medtok"];
}

export function runCli(args: string[]): string {
  const [cmd, ...prefix] = cliCommand();
  const proc = spawnSync(cmd, [...prefix, ...args], {
    encoding: "utf-8",
    maxBuffer: 64 * 1024 * 1024,
  });
  if (proc.error) {
    throw new CliError(`failed to launch ${cmd}: ${proc.error.message}`);
  }
  if (proc.status !== 0) {
    const detail = (proc.stderr || proc.stdout || "").trim();
    throw new CliError(`medtok ${args[0]} exited with ${proc.status}: ${detail}`);
  }
  return proc.stdout;
}
