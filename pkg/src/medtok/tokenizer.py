"""Frozen-artifact inference: code to token sequence, plus serialization.

An artifact directory is self-contained. It holds:

  codebook.mtcb   magic "MTCB" | u32 version | u32 N | u32 d
                  | 4 x u32 region start offsets | u32 K
                  | N x d little-endian f32 | trailing u64 payload hash
  params.bin      magic "MTPR" | u32 version | u32 tensor count
                  | per tensor: name, u32 rows, u32 cols, f32 data
  fused.mtes      the cached fused embeddings, one 4 x d block per code
                  in group order [ts | gs | tc | gc]
  config.json     config snapshot, type vocabulary, counts
  manifest.json   format version plus sha256 of every other file

Everything is stored in single precision; in-memory values are the f32
values widened to f64, so save -> load -> save is byte-identical.
Because the fused embeddings are cached at freeze time, tokenization
needs no knowledge graph or text embedding files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .binio import Reader, Writer, content_hash_u64, sha256_hex
from .errors import CorruptionError, FormatError, UnknownCodeError
from .fusion import FusedEmbeddings, FusionParams
from .graphenc import GraphEncoderParams
from .quantizer import GROUP_ORDER, Codebook, RegionLayout, quantize_all
from .textenc import load_states, save_states

CODEBOOK_MAGIC = b"MTCB"
PARAMS_MAGIC = b"MTPR"
ARTIFACT_VERSION = 1

CODEBOOK_FILE = "codebook.mtcb"
PARAMS_FILE = "params.bin"
FUSED_FILE = "fused.mtes"
CONFIG_FILE = "config.json"
MANIFEST_FILE = "manifest.json"

GROUP_JSON_NAMES = {
    "ts": "text_specific",
    "gs": "graph_specific",
    "tc": "text_cross",
    "gc": "graph_cross",
}


@dataclass
class TokenSequence:
    """Fixed-order token ids for one code: [ts | gs | tc | gc], length 4K."""

    code_id: str
    token_ids: np.ndarray  # (4K,) int64
    weights: np.ndarray  # (4K,) float64
    k: int

    @property
    def group_offsets(self) -> tuple[int, int, int, int]:
        return (0, self.k, 2 * self.k, 3 * self.k)

    def group(self, name: str) -> np.ndarray:
        i = GROUP_ORDER.index(name)
        return self.token_ids[i * self.k : (i + 1) * self.k]

    def group_weights(self, name: str) -> np.ndarray:
        i = GROUP_ORDER.index(name)
        return self.weights[i * self.k : (i + 1) * self.k]

    def to_json_dict(self) -> dict:
        return {
            "code_id": self.code_id,
            "tokens": {
                GROUP_JSON_NAMES[g]: [int(t) for t in self.group(g)] for g in GROUP_ORDER
            },
            "weights": {
                GROUP_JSON_NAMES[g]: [float(w) for w in self.group_weights(g)]
                for g in GROUP_ORDER
            },
        }


@dataclass
class TrainedTokenizer:
    """Frozen parameters plus the cached fused embeddings per code."""

    codebook: Codebook
    fusion_params: FusionParams
    graph_params: GraphEncoderParams
    fused_cache: dict[str, np.ndarray]  # code_id -> (4, d) float64
    config: dict

    @property
    def code_ids(self) -> list[str]:
        return list(self.fused_cache)

    @property
    def k(self) -> int:
        return int(self.config["topk"])


def _f32_roundtrip(arr: np.ndarray) -> np.ndarray:
    """Quantize to the artifact's storage precision."""
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


def freeze_tokenizer(state, registry, prepared, cfg) -> TrainedTokenizer:
    """Cache fused embeddings for the whole corpus under final parameters."""
    from .trainer import code_forward

    graph_view = state.graph_params
    fusion_view = state.fusion_params
    fused_cache: dict[str, np.ndarray] = {}
    for code_id in registry.code_ids():
        fused = code_forward(prepared[code_id], graph_view, fusion_view)
        block = np.vstack([fused.groups()[g].value[0] for g in GROUP_ORDER])
        fused_cache[code_id] = _f32_roundtrip(block)

    codebook = Codebook(_f32_roundtrip(state.codebook.c), state.codebook.layout)
    gp = state.graph_params
    graph_params = GraphEncoderParams(
        list(gp.type_vocab),
        _f32_roundtrip(gp.type_embed),
        [_f32_roundtrip(w) for w in gp.w_self],
        [_f32_roundtrip(w) for w in gp.w_nbr],
    )
    fp = state.fusion_params
    fusion_params = FusionParams(
        **{
            k: _f32_roundtrip(getattr(fp, k))
            for k in ("f_t", "f_g", "w_q_t", "w_k_t", "w_v_t", "w_q_g", "w_k_g", "w_v_g")
        },
        d=fp.d,
    )
    return TrainedTokenizer(
        codebook=codebook,
        fusion_params=fusion_params,
        graph_params=graph_params,
        fused_cache=fused_cache,
        config=cfg.to_dict(),
    )


def tokenize(code_id: str, tk: TrainedTokenizer) -> TokenSequence:
    """Deterministic token sequence for a code in the frozen corpus."""
    if code_id not in tk.fused_cache:
        raise UnknownCodeError(f"code {code_id!r} is not in the tokenizer corpus")
    block = tk.fused_cache[code_id]
    fused = FusedEmbeddings(
        e_t_s=nc.constant(block[0:1]),
        e_g_s=nc.constant(block[1:2]),
        e_t_c=nc.constant(block[2:3]),
        e_g_c=nc.constant(block[3:4]),
    )
    bundle = quantize_all(
        fused, tk.codebook, tk.k, bool(tk.config.get("cross_whole_shared", True))
    )
    groups = bundle.groups()
    token_ids = np.concatenate([groups[g].token_ids for g in GROUP_ORDER])
    weights = np.concatenate([groups[g].weights for g in GROUP_ORDER])
    return TokenSequence(code_id=code_id, token_ids=token_ids, weights=weights, k=tk.k)


def export_token_embeddings(tk: TrainedTokenizer, path: str | Path) -> None:
    """Write the N x d codeword table in the pooled-embedding format.

    Row ids are the token indices as strings; row i is codebook row i.
    """
    from .textenc import save_pooled

    n = tk.codebook.n
    save_pooled(path, [str(i) for i in range(n)], tk.codebook.c.astype(np.float32))


def _write_codebook(path: Path, cb: Codebook, k: int) -> None:
    payload = np.ascontiguousarray(cb.c, dtype="<f4").tobytes()
    with path.open("wb") as fh:
        w = Writer(fh)
        w.raw(CODEBOOK_MAGIC)
        w.u32(ARTIFACT_VERSION)
        w.u32(cb.n)
        w.u32(cb.d)
        for offset in cb.layout.as_offsets():
            w.u32(offset)
        w.u32(k)
        w.raw(payload)
        w.u64(content_hash_u64(payload))


def read_codebook(path: str | Path) -> tuple[Codebook, int]:
    """Parse a codebook file; returns (codebook, K)."""
    path = Path(path)
    with path.open("rb") as fh:
        r = Reader(fh, str(path))
        r.expect_magic(CODEBOOK_MAGIC)
        version = r.u32()
        if version > ARTIFACT_VERSION:
            raise FormatError(f"{path}: version {version} is newer than supported {ARTIFACT_VERSION}")
        n = r.u32()
        d = r.u32()
        offsets = [r.u32() for _ in range(4)]
        k = r.u32()
        payload = r.read_exact(n * d * 4)
        stored_hash = r.u64()
        r.expect_eof()
    if content_hash_u64(payload) != stored_hash:
        raise CorruptionError(f"{path}: payload hash mismatch")
    rows = np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float64)
    layout = RegionLayout.from_offsets(n, offsets)
    return Codebook(rows, layout), k


def _write_params(path: Path, tensors: dict[str, np.ndarray]) -> None:
    with path.open("wb") as fh:
        w = Writer(fh)
        w.raw(PARAMS_MAGIC)
        w.u32(ARTIFACT_VERSION)
        w.u32(len(tensors))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype=np.float32)
            w.string(name)
            w.u32(arr.shape[0])
            w.u32(arr.shape[1])
            w.f32_array(arr)


def _read_params(path: Path) -> dict[str, np.ndarray]:
    with path.open("rb") as fh:
        r = Reader(fh, str(path))
        r.expect_magic(PARAMS_MAGIC)
        version = r.u32()
        if version > ARTIFACT_VERSION:
            raise FormatError(f"{path}: version {version} is newer than supported {ARTIFACT_VERSION}")
        count = r.u32()
        tensors = {}
        for _ in range(count):
            name = r.string()
            rows = r.u32()
            cols = r.u32()
            tensors[name] = r.f32_array(rows * cols).reshape(rows, cols).astype(np.float64)
        r.expect_eof()
    return tensors


def _param_tensors(tk: TrainedTokenizer) -> dict[str, np.ndarray]:
    out = {"graph.type_embed": tk.graph_params.type_embed}
    for i, (ws, wn) in enumerate(zip(tk.graph_params.w_self, tk.graph_params.w_nbr)):
        out[f"graph.w_self.{i}"] = ws
        out[f"graph.w_nbr.{i}"] = wn
    for name in ("f_t", "f_g", "w_q_t", "w_k_t", "w_v_t", "w_q_g", "w_k_g", "w_v_g"):
        out[f"fusion.{name}"] = getattr(tk.fusion_params, name)
    return out


def save_artifact(tk: TrainedTokenizer, artifact_dir: str | Path) -> Path:
    """Write the artifact directory; the manifest carries content hashes."""
    artifact_dir = Path(artifact_dir)
    artifact_dir.mkdir(parents=True, exist_ok=True)

    _write_codebook(artifact_dir / CODEBOOK_FILE, tk.codebook, tk.k)
    _write_params(artifact_dir / PARAMS_FILE, _param_tensors(tk))
    save_states(
        artifact_dir / FUSED_FILE,
        {cid: block.astype(np.float32) for cid, block in tk.fused_cache.items()},
        dim=tk.codebook.d,
    )
    config_doc = {
        "format_version": ARTIFACT_VERSION,
        "config": tk.config,
        "type_vocab": tk.graph_params.type_vocab,
        "layers": len(tk.graph_params.w_self),
        "code_count": len(tk.fused_cache),
        "group_order": list(GROUP_ORDER),
    }
    (artifact_dir / CONFIG_FILE).write_text(
        json.dumps(config_doc, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )

    files = [CODEBOOK_FILE, PARAMS_FILE, FUSED_FILE, CONFIG_FILE]
    manifest = {
        "artifact": "medtok-tokenizer",
        "version": ARTIFACT_VERSION,
        "files": {name: sha256_hex(artifact_dir / name) for name in files},
    }
    (artifact_dir / MANIFEST_FILE).write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    return artifact_dir


def load_artifact(artifact_dir: str | Path) -> TrainedTokenizer:
    """Load and verify an artifact directory."""
    artifact_dir = Path(artifact_dir)
    manifest_path = artifact_dir / MANIFEST_FILE
    if not manifest_path.exists():
        raise FormatError(f"{artifact_dir}: missing {MANIFEST_FILE}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptionError(f"{manifest_path}: unreadable manifest: {exc}") from exc
    try:
        kind = manifest["artifact"]
        version = int(manifest["version"])
        file_digests = dict(manifest["files"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptionError(f"{manifest_path}: malformed manifest: {exc!r}") from exc
    if kind != "medtok-tokenizer":
        raise FormatError(f"{manifest_path}: not a tokenizer artifact manifest")
    if version > ARTIFACT_VERSION:
        raise FormatError(
            f"{artifact_dir}: artifact version {version} is newer than supported {ARTIFACT_VERSION}"
        )
    if version != ARTIFACT_VERSION:
        raise FormatError(f"{artifact_dir}: unknown artifact version {version}")
    expected_files = {CODEBOOK_FILE, PARAMS_FILE, FUSED_FILE, CONFIG_FILE}
    if set(file_digests) != expected_files:
        raise CorruptionError(
            f"{manifest_path}: manifest file list {sorted(file_digests)} != {sorted(expected_files)}"
        )
    for name, digest in file_digests.items():
        file_path = artifact_dir / name
        if not file_path.exists():
            raise CorruptionError(f"{artifact_dir}: missing file {name!r}")
        actual = sha256_hex(file_path)
        if actual != digest:
            raise CorruptionError(f"{artifact_dir}: content hash mismatch in {name!r}")

    config_doc = json.loads((artifact_dir / CONFIG_FILE).read_text(encoding="utf-8"))
    codebook, k = read_codebook(artifact_dir / CODEBOOK_FILE)
    tensors = _read_params(artifact_dir / PARAMS_FILE)
    raw_fused, dim = load_states(artifact_dir / FUSED_FILE)
    if dim != codebook.d:
        raise FormatError(f"{artifact_dir}: fused cache dim {dim} != codebook dim {codebook.d}")

    layers = int(config_doc["layers"])
    graph_params = GraphEncoderParams(
        list(config_doc["type_vocab"]),
        tensors["graph.type_embed"],
        [tensors[f"graph.w_self.{i}"] for i in range(layers)],
        [tensors[f"graph.w_nbr.{i}"] for i in range(layers)],
    )
    fusion_params = FusionParams(
        **{
            name: tensors[f"fusion.{name}"]
            for name in ("f_t", "f_g", "w_q_t", "w_k_t", "w_v_t", "w_q_g", "w_k_g", "w_v_g")
        },
        d=int(config_doc["config"]["dim"]),
    )
    fused_cache = {cid: block.astype(np.float64) for cid, block in raw_fused.items()}
    for cid, block in fused_cache.items():
        if block.shape != (4, codebook.d):
            raise FormatError(f"{artifact_dir}: fused block for {cid!r} has shape {block.shape}")

    config = dict(config_doc["config"])
    if int(config["topk"]) != k:
        raise FormatError(f"{artifact_dir}: config topk {config['topk']} != codebook K {k}")
    return TrainedTokenizer(
        codebook=codebook,
        fusion_params=fusion_params,
        graph_params=graph_params,
        fused_cache=fused_cache,
        config=config,
    )
