/**
 * Node binding for the medtok tokenizer.
 *
 * `load(dir)` verifies the artifact directory and returns a Tokenizer.
 * Tokenization goes through the medtok CLI (one process per call), so
 * token ids and weights are exactly the CLI's JSON output; embedding
 * lookups read the codebook binary directly.
 */

import { readArtifact, type ArtifactInfo, type RegionLayout, ArtifactError } from "./artifact.js";
import { runCli, CliError } from "./cli.js";

export { ArtifactError } from "./artifact.js";
export { CliError } from "./cli.js";
export type { RegionLayout } from "./artifact.js";

export const GROUP_ORDER = ["text_specific", "graph_specific", "text_cross", "graph_cross"] as const;
export type GroupName = (typeof GROUP_ORDER)[number];

export interface TokenizeResult {
  codeId: string;
  /** Flattened ids in fixed group order [ts | gs | tc | gc], length 4K. */
  tokenIds: number[];
  /** Aggregation weight per token, aligned with tokenIds. */
  weights: number[];
  /** Start offset of each group in the flat arrays: (0, K, 2K, 3K). */
  groupOffsets: [number, number, number, number];
  groups: Record<GroupName, { tokenIds: number[]; weights: number[] }>;
}

interface CliTokenizeDoc {
  code_id: string;
  tokens: Record<GroupName, number[]>;
  weights: Record<GroupName, number[]>;
}

export class ClosedError extends Error {}

export class Tokenizer {
  private info: ArtifactInfo | null;

  constructor(info: ArtifactInfo) {
    this.info = info;
  }

  private open(): ArtifactInfo {
    if (this.info === null) {
      throw new ClosedError("tokenizer handle is closed");
    }
    return this.info;
  }

  get artifactDir(): string {
    return this.open().dir;
  }

  get codebookSize(): number {
    return this.open().codebook.n;
  }

  get dim(): number {
    return this.open().codebook.dim;
  }

  get topK(): number {
    return this.open().codebook.k;
  }

  get regionLayout(): RegionLayout {
    return this.open().codebook.layout;
  }

  get codeCount(): number {
    return this.open().codeCount;
  }

  /** Parse the CLI's JSON tokenization into flat arrays plus offsets. */
  static parseCliDoc(doc: CliTokenizeDoc, k: number): TokenizeResult {
    const tokenIds: number[] = [];
    const weights: number[] = [];
    const groups = {} as TokenizeResult["groups"];
    for (const group of GROUP_ORDER) {
      const ids = doc.tokens[group];
      const w = doc.weights[group];
      if (!ids || !w || ids.length !== k || w.length !== k) {
        throw new ArtifactError(`tokenize output malformed for group ${group}`);
      }
      groups[group] = { tokenIds: ids, weights: w };
      tokenIds.push(...ids);
      weights.push(...w);
    }
    return {
      codeId: doc.code_id,
      tokenIds,
      weights,
      groupOffsets: [0, k, 2 * k, 3 * k],
      groups,
    };
  }

  tokenize(codeId: string): TokenizeResult {
    const info = this.open();
    const stdout = runCli([
      "tokenize",
      "--artifact",
      info.dir,
      "--code",
      codeId,
      "--json",
    ]);
    const doc = JSON.parse(stdout) as CliTokenizeDoc;
    return Tokenizer.parseCliDoc(doc, info.codebook.k);
  }

  /** The d-dimensional codeword for a token id, from the codebook binary. */
  embedding(tokenId: number): Float32Array {
    const { codebook } = this.open();
    if (!Number.isInteger(tokenId) || tokenId < 0 || tokenId >= codebook.n) {
      throw new RangeError(`token id ${tokenId} outside [0, ${codebook.n})`);
    }
    return codebook.rows.slice(tokenId * codebook.dim, (tokenId + 1) * codebook.dim);
  }

  /** Release the handle; later calls throw ClosedError. Idempotent. */
  close(): void {
    this.info = null;
  }

  get closed(): boolean {
    return this.info === null;
  }
}

/** Open and verify an artifact directory. */
export function load(artifactDir: string): Tokenizer {
  return new Tokenizer(readArtifact(artifactDir));
}
