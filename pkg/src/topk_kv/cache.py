"""Persisted KV cache: typed container, bit-exact on-disk format, sinks.

File layout (little-endian), version 1:

    magic   "TKKV" (4 bytes)
    version u32
    meta    L, H, N, d, D as u64; dtype u8 (1 = f32); model_id u32 len + UTF-8
    table   2*L*H u64 byte offsets: keys then values per (layer, head),
            layer-major, i.e. section (l*H + h)*2 + {0: keys, 1: values}
    payload raw row-major f32, one (N, d) section per table entry

Sections are independently seekable so indexing and decoding can stream one
head at a time; a value row can be fetched with a single pread.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FormatError, InputError
from .tensor import DTYPE

CACHE_MAGIC = b"TKKV"
CACHE_VERSION = 1
_DTYPE_CODES = {"f32": 1}
_DTYPE_NAMES = {v: k for k, v in _DTYPE_CODES.items()}
_SCALAR_BYTES = 4

_FIXED_HEADER = struct.Struct("<4sIQQQQQB")  # magic, version, L, H, N, d, D, dtype


@dataclass(frozen=True)
class CacheMeta:
    """Shape card for one cache: layers, heads, tokens, per-head dim."""

    n_layers: int
    n_heads: int
    n_tokens: int
    head_dim: int
    dtype: str = "f32"
    model_id: str = ""

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "n_tokens", "head_dim"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.dtype not in _DTYPE_CODES:
            raise InputError(f"unsupported dtype {self.dtype!r}")

    @property
    def model_dim(self) -> int:
        return self.n_heads * self.head_dim

    def meta_hash(self) -> bytes:
        blob = _FIXED_HEADER.pack(
            CACHE_MAGIC,
            CACHE_VERSION,
            self.n_layers,
            self.n_heads,
            self.n_tokens,
            self.head_dim,
            self.model_dim,
            _DTYPE_CODES[self.dtype],
        )
        return hashlib.sha256(blob + self.model_id.encode()).digest()

    def with_tokens(self, n_tokens: int) -> "CacheMeta":
        return replace(self, n_tokens=n_tokens)


@dataclass
class KvCache:
    """In-memory cache: keys and values with shape (L, H, N, d), float32."""

    meta: CacheMeta
    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        shape = (
            self.meta.n_layers,
            self.meta.n_heads,
            self.meta.n_tokens,
            self.meta.head_dim,
        )
        for name in ("keys", "values"):
            a = np.ascontiguousarray(getattr(self, name), dtype=DTYPE)
            if a.shape != shape:
                raise InputError(f"{name} shape {a.shape} != {shape}")
            if not np.isfinite(a).all():
                raise InputError(f"{name} contains non-finite entries")
            setattr(self, name, a)


@dataclass(frozen=True)
class CacheChunk:
    """A contiguous block of rows for one (layer, head), emitted by prefill."""

    layer: int
    head: int
    row_start: int
    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.keys.shape != self.values.shape:
            raise InputError("chunk keys/values shapes differ")


def cache_bytes(meta: CacheMeta, bytes_per_scalar: int) -> int:
    """Bytes held by a cache: two tensors of N x D floats per layer."""
    return 2 * meta.n_tokens * meta.model_dim * meta.n_layers * bytes_per_scalar


# ---------------------------------------------------------------------------
# Layout helpers
# ---------------------------------------------------------------------------


def _header_bytes(meta: CacheMeta) -> bytes:
    mid = meta.model_id.encode()
    return (
        _FIXED_HEADER.pack(
            CACHE_MAGIC,
            CACHE_VERSION,
            meta.n_layers,
            meta.n_heads,
            meta.n_tokens,
            meta.head_dim,
            meta.model_dim,
            _DTYPE_CODES[meta.dtype],
        )
        + struct.pack("<I", len(mid))
        + mid
    )


def _section_offsets(meta: CacheMeta, header_len: int) -> np.ndarray:
    n_sections = 2 * meta.n_layers * meta.n_heads
    data_base = header_len + 8 * n_sections
    section_bytes = meta.n_tokens * meta.head_dim * _SCALAR_BYTES
    return data_base + section_bytes * np.arange(n_sections, dtype=np.uint64)


def _section_index(meta: CacheMeta, layer: int, head: int, kind: str) -> int:
    if kind not in ("keys", "values"):
        raise InputError(f"unknown section kind {kind!r}")
    if not (0 <= layer < meta.n_layers and 0 <= head < meta.n_heads):
        raise InputError(f"(layer={layer}, head={head}) out of range")
    return (layer * meta.n_heads + head) * 2 + (0 if kind == "keys" else 1)


def _read_exact(f, n: int, what: str) -> bytes:
    blob = f.read(n)
    if len(blob) < n:
        raise FormatError(f"file truncated reading {what}", offset=f.tell())
    return blob


def _read_header(f) -> tuple[CacheMeta, np.ndarray]:
    fixed = _read_exact(f, _FIXED_HEADER.size, "header")
    magic, version, L, H, N, d, D, dtype_code = _FIXED_HEADER.unpack(fixed)
    if magic != CACHE_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != CACHE_VERSION:
        raise FormatError(f"unsupported cache version {version}", offset=4)
    if dtype_code not in _DTYPE_NAMES:
        raise FormatError(f"unknown dtype code {dtype_code}", offset=_FIXED_HEADER.size - 1)
    if min(L, H, N, d) < 1 or D != H * d:
        raise FormatError(
            f"invalid meta L={L} H={H} N={N} d={d} D={D}", offset=8
        )
    (mid_len,) = struct.unpack("<I", _read_exact(f, 4, "model_id length"))
    if mid_len > 4096:
        raise FormatError(f"implausible model_id length {mid_len}", offset=f.tell() - 4)
    model_id = _read_exact(f, mid_len, "model_id").decode()
    meta = CacheMeta(L, H, N, d, _DTYPE_NAMES[dtype_code], model_id)

    table_at = f.tell()
    n_sections = 2 * L * H
    table = np.frombuffer(
        _read_exact(f, 8 * n_sections, "offset table"), dtype="<u8"
    )
    expected = _section_offsets(meta, table_at)
    if not np.array_equal(table, expected):
        raise FormatError("offset table does not match meta-derived layout", offset=table_at)
    return meta, table


class CacheFile:
    """Read-side handle over a TKKV file: header once, sections on demand."""

    def __init__(self, path):
        self.path = os.fspath(path)
        with open(self.path, "rb") as f:
            self.meta, self._offsets = _read_header(f)
            f.seek(0, os.SEEK_END)
            size = f.tell()
        section_bytes = self.meta.n_tokens * self.meta.head_dim * _SCALAR_BYTES
        expected = int(self._offsets[-1]) + section_bytes
        if size != expected:
            raise FormatError(
                f"file size {size} != expected {expected}", offset=min(size, expected)
            )
        self._fd = os.open(self.path, os.O_RDONLY)
        self._row_bytes = self.meta.head_dim * _SCALAR_BYTES

    def close(self):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _pread(self, offset: int, n: int) -> bytes:
        blob = os.pread(self._fd, n, offset)
        if len(blob) < n:
            raise FormatError("file truncated reading payload", offset=offset + len(blob))
        return blob

    def read_section(self, layer: int, head: int, kind: str) -> np.ndarray:
        """Whole (N, d) section for one head."""
        return self.read_rows(layer, head, kind, 0, self.meta.n_tokens)

    def read_rows(self, layer: int, head: int, kind: str, start: int, count: int) -> np.ndarray:
        base = int(self._offsets[_section_index(self.meta, layer, head, kind)])
        blob = self._pread(base + start * self._row_bytes, count * self._row_bytes)
        return np.frombuffer(blob, dtype="<f4").reshape(count, self.meta.head_dim)

    def read_row_ids(self, layer: int, head: int, kind: str, ids: np.ndarray) -> np.ndarray:
        """Gather individual rows by cache position (one pread per row)."""
        base = int(self._offsets[_section_index(self.meta, layer, head, kind)])
        out = np.empty((len(ids), self.meta.head_dim), dtype=DTYPE)
        for i, row in enumerate(ids):
            blob = self._pread(base + int(row) * self._row_bytes, self._row_bytes)
            out[i] = np.frombuffer(blob, dtype="<f4")
        return out

    def load(self) -> KvCache:
        L, H = self.meta.n_layers, self.meta.n_heads
        shape = (L, H, self.meta.n_tokens, self.meta.head_dim)
        keys = np.empty(shape, dtype=DTYPE)
        values = np.empty(shape, dtype=DTYPE)
        for l in range(L):
            for h in range(H):
                keys[l, h] = self.read_section(l, h, "keys")
                values[l, h] = self.read_section(l, h, "values")
        return KvCache(self.meta, keys, values)


class CacheFileWriter:
    """Write-side handle: preallocates the full layout, accepts row blocks.

    Also serves reads of already-written rows, which exact chunked prefill
    uses to stream history back without holding it in memory.
    """

    def __init__(self, meta: CacheMeta, path):
        self.meta = meta
        self.path = os.fspath(path)
        header = _header_bytes(meta)
        table_at = len(header)
        self._offsets = _section_offsets(meta, table_at)
        self._row_bytes = meta.head_dim * _SCALAR_BYTES
        section_bytes = meta.n_tokens * self._row_bytes
        total = int(self._offsets[-1]) + section_bytes
        self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT | os.O_TRUNC, 0o644)
        os.pwrite(self._fd, header + self._offsets.astype("<u8").tobytes(), 0)
        os.truncate(self._fd, total)
        self._written = np.zeros(2 * meta.n_layers * meta.n_heads, dtype=np.int64)

    def write_chunk(self, chunk: CacheChunk) -> None:
        for kind, data in (("keys", chunk.keys), ("values", chunk.values)):
            sec = _section_index(self.meta, chunk.layer, chunk.head, kind)
            if chunk.row_start != self._written[sec]:
                raise InputError(
                    f"chunk rows for section {sec} must arrive in order "
                    f"(got row_start {chunk.row_start}, expected {self._written[sec]})"
                )
            end = chunk.row_start + data.shape[0]
            if end > self.meta.n_tokens:
                raise InputError("chunk overruns the declared token count")
            base = int(self._offsets[sec])
            blob = np.ascontiguousarray(data, dtype=DTYPE).tobytes()
            os.pwrite(self._fd, blob, base + chunk.row_start * self._row_bytes)
            self._written[sec] = end

    def read_rows(self, layer: int, head: int, kind: str, start: int, count: int) -> np.ndarray:
        sec = _section_index(self.meta, layer, head, kind)
        if start + count > self._written[sec]:
            raise InputError("reading rows that have not been written yet")
        base = int(self._offsets[sec])
        blob = os.pread(self._fd, count * self._row_bytes, base + start * self._row_bytes)
        return np.frombuffer(blob, dtype="<f4").reshape(count, self.meta.head_dim)

    def rows_written(self, layer: int, head: int, kind: str = "keys") -> int:
        return int(self._written[_section_index(self.meta, layer, head, kind)])

    def close(self):
        if self._fd is not None:
            if not (self._written == self.meta.n_tokens).all():
                os.close(self._fd)
                self._fd = None
                raise InputError("cache file closed before all rows were written")
            os.close(self._fd)
            self._fd = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, *exc):
        if exc_type is None:
            self.close()
        elif self._fd is not None:
            os.close(self._fd)
            self._fd = None


class MemoryCacheSink:
    """Chunk sink backed by in-memory arrays; the test-scale counterpart."""

    def __init__(self, meta: CacheMeta):
        self.meta = meta
        shape = (meta.n_layers, meta.n_heads, meta.n_tokens, meta.head_dim)
        self.keys = np.zeros(shape, dtype=DTYPE)
        self.values = np.zeros(shape, dtype=DTYPE)
        self._written = np.zeros((meta.n_layers, meta.n_heads), dtype=np.int64)
        self.chunks_seen: list[tuple[int, int, int, int]] = []

    def write_chunk(self, chunk: CacheChunk) -> None:
        if chunk.row_start != self._written[chunk.layer, chunk.head]:
            raise InputError("chunk rows must arrive in order")
        end = chunk.row_start + chunk.keys.shape[0]
        self.keys[chunk.layer, chunk.head, chunk.row_start:end] = chunk.keys
        self.values[chunk.layer, chunk.head, chunk.row_start:end] = chunk.values
        self._written[chunk.layer, chunk.head] = end
        self.chunks_seen.append((chunk.layer, chunk.head, chunk.row_start, end))

    def read_rows(self, layer: int, head: int, kind: str, start: int, count: int) -> np.ndarray:
        if start + count > self._written[layer, head]:
            raise InputError("reading rows that have not been written yet")
        arr = self.keys if kind == "keys" else self.values
        return arr[layer, head, start : start + count]

    def to_cache(self) -> KvCache:
        if not (self._written == self.meta.n_tokens).all():
            raise InputError("sink is missing rows")
        return KvCache(self.meta, self.keys, self.values)


def write_cache(cache: KvCache, path) -> None:
    """Persist a whole in-memory cache; round trip is bit-exact."""
    with CacheFileWriter(cache.meta, path) as w:
        for l in range(cache.meta.n_layers):
            for h in range(cache.meta.n_heads):
                w.write_chunk(
                    CacheChunk(l, h, 0, cache.keys[l, h], cache.values[l, h])
                )


def read_cache(path) -> KvCache:
    """Load a whole cache file into memory, validating the header."""
    with CacheFile(path) as f:
        return f.load()
