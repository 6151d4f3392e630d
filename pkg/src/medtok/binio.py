"""Little-endian binary primitives with offset-aware error reporting."""

from __future__ import annotations

import hashlib
import struct
from typing import BinaryIO

import numpy as np

from .errors import FormatError


class Reader:
    """Tracks the byte offset so format errors can name it exactly."""

    def __init__(self, fh: BinaryIO, name: str):
        self.fh = fh
        self.name = name
        self.offset = 0

    def read_exact(self, n: int) -> bytes:
        data = self.fh.read(n)
        if len(data) != n:
            raise FormatError(
                f"{self.name}: truncated at byte {self.offset + len(data)} "
                f"(needed {n} more bytes)"
            )
        self.offset += n
        return data

    def expect_magic(self, magic: bytes) -> None:
        got = self.read_exact(len(magic))
        if got != magic:
            raise FormatError(f"{self.name}: bad magic {got!r}, expected {magic!r}")

    def u32(self) -> int:
        return struct.unpack("<I", self.read_exact(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.read_exact(8))[0]

    def string(self) -> str:
        n = self.u32()
        raw = self.read_exact(n)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.name}: invalid UTF-8 at byte {self.offset - n}") from exc

    def f32_array(self, count: int) -> np.ndarray:
        raw = self.read_exact(count * 4)
        return np.frombuffer(raw, dtype="<f4").copy()

    def expect_eof(self) -> None:
        extra = self.fh.read(1)
        if extra:
            raise FormatError(f"{self.name}: trailing data at byte {self.offset}")


class Writer:
    def __init__(self, fh: BinaryIO):
        self.fh = fh

    def raw(self, data: bytes) -> None:
        self.fh.write(data)

    def u32(self, v: int) -> None:
        self.fh.write(struct.pack("<I", v))

    def u64(self, v: int) -> None:
        self.fh.write(struct.pack("<Q", v))

    def string(self, s: str) -> None:
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.fh.write(raw)

    def f32_array(self, arr: np.ndarray) -> None:
        self.fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def content_hash_u64(payload: bytes) -> int:
    """First 8 bytes of sha256, little-endian, as an unsigned integer."""
    digest = hashlib.sha256(payload).digest()
    return struct.unpack("<Q", digest[:8])[0]


def sha256_hex(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
