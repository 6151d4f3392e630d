/** Build (and cache) tokenizer artifacts through the CLI for tests. */

import { spawnSync } from "node:child_process";
import { existsSync, mkdirSync } from "node:fs";
import { join } from "node:path";

import { cliCommand } from "../src/cli.js";

export const CACHE_DIR = join(import.meta.dirname, "..", ".cache");

function sh(args: string[]): void {
  const [cmd, ...prefix] = cliCommand();
  const proc = spawnSync(cmd, [...prefix, ...args], { encoding: "utf-8" });
  if (proc.status !== 0) {
    throw new Error(`medtok ${args[0]} failed: ${proc.stderr || proc.stdout}`);
  }
}

export interface BuiltArtifact {
  artifactDir: string;
  corpusDir: string;
  runDir: string;
}

/** Generate a synthetic corpus and train a tokenizer, cached by name. */
export function buildArtifact(
  name: string,
  gen: { families: number; codesPerFamily: number; seed: number; textDim: number },
  train: string[],
): BuiltArtifact {
  const root = join(CACHE_DIR, name);
  const corpusDir = join(root, "corpus");
  const runDir = join(root, "run");
  const artifactDir = join(runDir, "artifact");
  if (existsSync(join(artifactDir, "manifest.json"))) {
    return { artifactDir, corpusDir, runDir };
  }
  mkdirSync(root, { recursive: true });
  sh([
    "gen-synthetic",
    "--families",
    String(gen.families),
    "--codes-per-family",
    String(gen.codesPerFamily),
    "--seed",
    String(gen.seed),
    "--text-dim",
    String(gen.textDim),
    "--out",
    corpusDir,
  ]);
  sh([
    "train",
    "--codes",
    join(corpusDir, "codes.jsonl"),
    "--kg-nodes",
    join(corpusDir, "kg_nodes.tsv"),
    "--kg-edges",
    join(corpusDir, "kg_edges.tsv"),
    "--map",
    join(corpusDir, "mapping.tsv"),
    "--text-emb",
    join(corpusDir, "text_pooled.mteb"),
    "--text-states",
    join(corpusDir, "text_states.mtes"),
    "--log-every",
    "0",
    ...train,
    "--out",
    runDir,
  ]);
  return { artifactDir, corpusDir, runDir };
}

export function tinyArtifact(): BuiltArtifact {
  return buildArtifact(
    "tiny",
    { families: 2, codesPerFamily: 20, seed: 5, textDim: 8 },
    [
      "--preset",
      "desk",
      "--codebook-size",
      "32",
      "--dim",
      "8",
      "--graph-dim",
      "8",
      "--topk",
      "4",
      "--steps",
      "25",
      "--batch",
      "20",
      "--seed",
      "5",
      "--checkpoint-every",
      "0",
    ],
  );
}

/** The full desk-preset artifact used by the parity suite. */
export function deskArtifact(): BuiltArtifact {
  return buildArtifact(
    "desk",
    { families: 4, codesPerFamily: 500, seed: 7, textDim: 32 },
    ["--preset", "desk", "--seed", "7"],
  );
}
