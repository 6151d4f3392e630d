/**
 * Readers for the tokenizer artifact's on-disk formats.
 *
 * An artifact directory contains codebook.mtcb, params.bin, fused.mtes,
 * config.json, and manifest.json; the manifest records a sha256 per
 * file. The codebook file layout is:
 *
 *   "MTCB" | u32 version | u32 N | u32 d | 4 x u32 region offsets
 *   | u32 K | N x d little-endian f32 | u64 payload hash
 *
 * where the trailing hash is the first 8 bytes of sha256(payload),
 * little-endian. Token-embedding exports use the pooled-embedding
 * format:
 *
 *   "MTEB" | u32 version | u64 count | u32 dim
 *   | count x dim little-endian f32 | count length-prefixed UTF-8 ids
 */

import { createHash } from "node:crypto";
import { readFileSync } from "node:fs";
import { join } from "node:path";

export class ArtifactError extends Error {}

export interface RegionLayout {
  textSpecific: [number, number];
  graphSpecific: [number, number];
  textShared: [number, number];
  graphShared: [number, number];
}

export interface CodebookFile {
  n: number;
  dim: number;
  k: number;
  layout: RegionLayout;
  /** Row-major N x dim codeword table. */
  rows: Float32Array;
}

export interface ArtifactInfo {
  dir: string;
  codebook: CodebookFile;
  config: Record<string, unknown>;
  codeCount: number;
}

const SUPPORTED_VERSION = 1;

class Cursor {
  offset = 0;
  constructor(private buf: Buffer, private name: string) {}

  take(n: number): Buffer {
    if (this.offset + n > this.buf.length) {
      throw new ArtifactError(
        `${this.name}: truncated at byte ${this.buf.length} (needed ${this.offset + n})`,
      );
    }
    const out = this.buf.subarray(this.offset, this.offset + n);
    this.offset += n;
    return out;
  }

  u32(): number {
    return this.take(4).readUInt32LE(0);
  }

  u64(): number {
    const v = this.take(8).readBigUInt64LE(0);
    if (v > BigInt(Number.MAX_SAFE_INTEGER)) {
      throw new ArtifactError(`${this.name}: u64 value too large`);
    }
    return Number(v);
  }

  magic(expected: string): void {
    const got = this.take(expected.length).toString("latin1");
    if (got !== expected) {
      throw new ArtifactError(`${this.name}: bad magic ${JSON.stringify(got)}, expected ${expected}`);
    }
  }

  string(): string {
    const n = this.u32();
    return this.take(n).toString("utf-8");
  }

  expectEnd(): void {
    if (this.offset !== this.buf.length) {
      throw new ArtifactError(`${this.name}: trailing data at byte ${this.offset}`);
    }
  }
}

function sha256Hex(buf: Buffer): string {
  return createHash("sha256").update(buf).digest("hex");
}

/** Little-endian u64 view of the first 8 bytes of sha256(payload). */
function payloadHash(buf: Buffer): bigint {
  return createHash("sha256").update(buf).digest().readBigUInt64LE(0);
}

export function readCodebookFile(path: string): CodebookFile {
  const cur = new Cursor(readFileSync(path), path);
  cur.magic("MTCB");
  const version = cur.u32();
  if (version !== SUPPORTED_VERSION) {
    throw new ArtifactError(`${path}: unsupported codebook version ${version}`);
  }
  const n = cur.u32();
  const dim = cur.u32();
  const starts = [cur.u32(), cur.u32(), cur.u32(), cur.u32()];
  const k = cur.u32();
  const payload = cur.take(n * dim * 4);
  const stored = cur.take(8).readBigUInt64LE(0);
  cur.expectEnd();
  if (payloadHash(payload) !== stored) {
    throw new ArtifactError(`${path}: payload hash mismatch`);
  }
  const rows = new Float32Array(n * dim);
  for (let i = 0; i < rows.length; i++) {
    rows[i] = payload.readFloatLE(i * 4);
  }
  const layout: RegionLayout = {
    textSpecific: [starts[0], starts[1]],
    graphSpecific: [starts[1], starts[2]],
    textShared: [starts[2], starts[3]],
    graphShared: [starts[3], n],
  };
  return { n, dim, k, layout, rows };
}

export interface PooledEmbeddings {
  ids: string[];
  dim: number;
  vectors: Float32Array; // row-major count x dim
}

export function readPooledFile(path: string): PooledEmbeddings {
  const cur = new Cursor(readFileSync(path), path);
  cur.magic("MTEB");
  const version = cur.u32();
  if (version !== SUPPORTED_VERSION) {
    throw new ArtifactError(`${path}: unsupported version ${version}`);
  }
  const count = cur.u64();
  const dim = cur.u32();
  const payload = cur.take(count * dim * 4);
  const vectors = new Float32Array(count * dim);
  for (let i = 0; i < vectors.length; i++) {
    vectors[i] = payload.readFloatLE(i * 4);
  }
  const ids: string[] = [];
  for (let i = 0; i < count; i++) {
    ids.push(cur.string());
  }
  cur.expectEnd();
  return { ids, dim, vectors };
}

/** Load and hash-verify an artifact directory without the Python side. */
export function readArtifact(dir: string): ArtifactInfo {
  let manifest: { artifact?: string; version?: number; files?: Record<string, string> };
  try {
    manifest = JSON.parse(readFileSync(join(dir, "manifest.json"), "utf-8"));
  } catch (err) {
    throw new ArtifactError(`${dir}: unreadable manifest.json: ${String(err)}`);
  }
  if (manifest.artifact !== "medtok-tokenizer") {
    throw new ArtifactError(`${dir}: not a tokenizer artifact`);
  }
  if (manifest.version !== SUPPORTED_VERSION) {
    throw new ArtifactError(`${dir}: unsupported artifact version ${manifest.version}`);
  }
  if (!manifest.files) {
    throw new ArtifactError(`${dir}: manifest lists no files`);
  }
  for (const [name, digest] of Object.entries(manifest.files)) {
    let data: Buffer;
    try {
      data = readFileSync(join(dir, name));
    } catch {
      throw new ArtifactError(`${dir}: missing file ${name}`);
    }
    if (sha256Hex(data) !== digest) {
      throw new ArtifactError(`${dir}: content hash mismatch in ${name}`);
    }
  }
  const configDoc = JSON.parse(readFileSync(join(dir, "config.json"), "utf-8")) as {
    config: Record<string, unknown>;
    code_count: number;
  };
  const codebook = readCodebookFile(join(dir, "codebook.mtcb"));
  return { dir, codebook, config: configDoc.config, codeCount: configDoc.code_count };
}
