"""Binary container for named arrays plus a JSON meta block.

Layout, all integers little-endian:

    8 bytes   magic ``KWSTNSR0``
    u32       format version (currently 1)
    u32       meta length, then that many bytes of canonical JSON
    u32       array count
    per array:
        u16   name length, then utf-8 name
        u8    dtype code (0 = float64, 1 = int64)
        u8    rank
        u32*  dims
        raw   little-endian payload, row-major

Checkpoints, train state, and per-speaker feature/label shards all reuse
this one format. Writing the same content twice produces identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, VersionError

MAGIC = b"KWSTNSR0"
VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_CODES = {np.dtype("float64"): 0, np.dtype("int64"): 1}


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, no whitespace, ascii-safe."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def write_tensor_file(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Serialize meta + named arrays. Array insertion order is preserved."""
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    meta_bytes = canonical_json(meta).encode("utf-8")
    chunks.append(struct.pack("<I", len(meta_bytes)))
    chunks.append(meta_bytes)
    chunks.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        # asarray, not ascontiguousarray: the latter silently promotes 0-d
        # arrays to shape (1,).  tobytes() below emits C order either way.
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            arr = arr.astype(
                np.int64 if np.issubdtype(arr.dtype, np.integer) else np.float64
            )
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(_DTYPES[_CODES[arr.dtype]], copy=False).tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CorruptFileError(f"{self.path}: truncated (needed {n} more bytes)")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_tensor_file(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a container back into (meta, arrays). Raises on any damage."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(8) != MAGIC:
        raise CorruptFileError(f"{path}: bad magic, not a tensor container")
    version = r.u32()
    if version != VERSION:
        raise VersionError(f"{path}: format version {version}, expected {VERSION}")
    meta_len = r.u32()
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptFileError(f"{path}: unreadable meta block ({e})") from e
    arrays: dict[str, np.ndarray] = {}
    count = r.u32()
    for _ in range(count):
        name_len = struct.unpack("<H", r.take(2))[0]
        name = r.take(name_len).decode("utf-8")
        code, ndim = struct.unpack("<BB", r.take(2))
        if code not in _DTYPES:
            raise CorruptFileError(f"{path}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        n_items = 1
        for d in dims:
            n_items *= d
        raw = r.take(8 * n_items)
        arrays[name] = np.frombuffer(raw, dtype=_DTYPES[code]).reshape(dims).copy()
    if r.off != len(r.buf):
        raise CorruptFileError(f"{path}: {len(r.buf) - r.off} trailing bytes")
    return meta, arrays
