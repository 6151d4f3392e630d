"""Frozen text representations: binary formats and the remote client.

Two file formats carry text-encoder outputs (little-endian, f32):

  pooled  magic "MTEB" | u32 version | u64 count | u32 dim
          | count x dim f32 | count length-prefixed UTF-8 code ids
  states  magic "MTES" | u32 version | u64 count | u32 dim
          | per item: length-prefixed code id, u32 len, len x dim f32

Text embeddings are inputs, never trained: nothing in this package
mutates them after load.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests

from .binio import Reader, Writer
from .errors import ContractError, FormatError, ServiceError

POOLED_MAGIC = b"MTEB"
STATES_MAGIC = b"MTES"
FORMAT_VERSION = 1
ENDPOINT_ENV_VAR = "MEDTOK_EMBED_URL"


@dataclass
class TextEmbeddingSet:
    """Pooled vector per code, optional per-token state matrix per code."""

    pooled: dict[str, np.ndarray]
    states: dict[str, np.ndarray] = field(default_factory=dict)
    d_t: int = 0

    def __post_init__(self):
        if self.d_t == 0 and self.pooled:
            self.d_t = len(next(iter(self.pooled.values())))

    def __len__(self) -> int:
        return len(self.pooled)

    def states_or_pooled(self, code_id: str) -> np.ndarray:
        """Per-token states, or the pooled vector as a length-1 sequence."""
        if code_id in self.states:
            return self.states[code_id]
        return self.pooled[code_id].reshape(1, -1)


def save_pooled(path: str | Path, ids: list[str], vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise FormatError("save_pooled: vectors must be (len(ids), dim)")
    with open(path, "wb") as fh:
        w = Writer(fh)
        w.raw(POOLED_MAGIC)
        w.u32(FORMAT_VERSION)
        w.u64(len(ids))
        w.u32(vectors.shape[1])
        w.f32_array(vectors)
        for code_id in ids:
            w.string(code_id)


def load_pooled(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, "rb") as fh:
        r = Reader(fh, str(path))
        r.expect_magic(POOLED_MAGIC)
        version = r.u32()
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        count = r.u64()
        dim = r.u32()
        flat = r.f32_array(count * dim)
        vectors = flat.reshape(count, dim)
        ids = [r.string() for _ in range(count)]
        r.expect_eof()
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate code ids")
    return ids, vectors


def save_states(path: str | Path, items: dict[str, np.ndarray], dim: int) -> None:
    with open(path, "wb") as fh:
        w = Writer(fh)
        w.raw(STATES_MAGIC)
        w.u32(FORMAT_VERSION)
        w.u64(len(items))
        w.u32(dim)
        for code_id, states in items.items():
            states = np.asarray(states, dtype=np.float32)
            if states.ndim != 2 or states.shape[1] != dim:
                raise FormatError(f"save_states: {code_id!r} states must be (len, {dim})")
            w.string(code_id)
            w.u32(states.shape[0])
            w.f32_array(states)


def load_states(path: str | Path) -> tuple[dict[str, np.ndarray], int]:
    with open(path, "rb") as fh:
        r = Reader(fh, str(path))
        r.expect_magic(STATES_MAGIC)
        version = r.u32()
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        count = r.u64()
        dim = r.u32()
        items: dict[str, np.ndarray] = {}
        for _ in range(count):
            code_id = r.string()
            if code_id in items:
                raise FormatError(f"{path}: duplicate code id {code_id!r}")
            n = r.u32()
            items[code_id] = r.f32_array(n * dim).reshape(n, dim)
        r.expect_eof()
    return items, dim


def load_text_embeddings(
    pooled_path: str | Path, states_path: str | Path | None = None
) -> TextEmbeddingSet:
    """Load pooled vectors and, if given, per-token states."""
    ids, vectors = load_pooled(pooled_path)
    pooled = {code_id: vectors[i].astype(np.float64) for i, code_id in enumerate(ids)}
    states: dict[str, np.ndarray] = {}
    dim = vectors.shape[1]
    if states_path is not None:
        raw_states, states_dim = load_states(states_path)
        if states_dim != dim:
            raise FormatError(
                f"{states_path}: state dimension {states_dim} != pooled dimension {dim}"
            )
        for code_id, m in raw_states.items():
            if code_id not in pooled:
                raise FormatError(f"{states_path}: states for unknown code {code_id!r}")
            states[code_id] = m.astype(np.float64)
    return TextEmbeddingSet(pooled=pooled, states=states, d_t=dim)


def save_text_embeddings(
    emb: TextEmbeddingSet, pooled_path: str | Path, states_path: str | Path | None = None
) -> None:
    ids = list(emb.pooled)
    save_pooled(pooled_path, ids, np.stack([emb.pooled[i] for i in ids]))
    if states_path is not None:
        save_states(states_path, emb.states, emb.d_t)


class RemoteEmbeddingClient:
    """HTTP client for a text embedding service.

    POSTs {"texts": [...]} to {endpoint}/embed and expects
    {"vectors": [[...]], "states": [[[...]]]} back ("states" optional).
    Transient failures (connection errors, timeouts, 5xx) are retried
    twice with exponential backoff.
    """

    def __init__(
        self,
        endpoint: str | None = None,
        timeout: float = 30.0,
        retries: int = 2,
        backoff: float = 0.5,
    ):
        endpoint = endpoint or os.environ.get(ENDPOINT_ENV_VAR)
        if not endpoint:
            raise ServiceError(f"no endpoint given and {ENDPOINT_ENV_VAR} is unset")
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._dim: int | None = None

    def fetch(self, texts: list[str]) -> tuple[np.ndarray, list[np.ndarray] | None]:
        """Fetch pooled vectors (and states when provided) for texts."""
        if not texts:
            return np.zeros((0, self._dim or 0)), None
        payload = self._post({"texts": list(texts)})
        if "vectors" not in payload:
            raise ContractError("embedding response missing 'vectors'")
        vectors = np.asarray(payload["vectors"], dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(texts):
            raise ContractError(
                f"expected {len(texts)} vectors of uniform dimension, got shape {vectors.shape}"
            )
        if self._dim is None:
            self._dim = vectors.shape[1]
        elif vectors.shape[1] != self._dim:
            raise ContractError(
                f"dimension changed across calls: {vectors.shape[1]} != {self._dim}"
            )
        states = None
        if payload.get("states") is not None:
            states = [np.asarray(s, dtype=np.float64) for s in payload["states"]]
            if len(states) != len(texts):
                raise ContractError("states count does not match texts")
            for s in states:
                if s.ndim != 2 or s.shape[1] != self._dim:
                    raise ContractError(f"state matrix shape {s.shape} does not match dim {self._dim}")
        return vectors, states

    def _post(self, body: dict) -> dict:
        url = f"{self.endpoint}/embed"
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                resp = requests.post(url, json=body, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = exc
                continue
            if resp.status_code >= 500:
                last_error = ServiceError(f"{url} returned {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise ServiceError(f"{url} returned {resp.status_code}")
            try:
                return resp.json()
            except ValueError as exc:
                raise ContractError(f"{url} returned non-JSON body") from exc
        raise ServiceError(f"{url} failed after {self.retries + 1} attempts: {last_error}")


def fetch_embeddings_remote(
    endpoint: str | None, texts: list[str], timeout: float = 30.0
) -> tuple[np.ndarray, list[np.ndarray] | None]:
    """One-shot fetch; see RemoteEmbeddingClient."""
    return RemoteEmbeddingClient(endpoint, timeout=timeout).fetch(texts)
