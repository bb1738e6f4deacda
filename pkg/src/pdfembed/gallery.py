"""Gallery of vector sets and an exhaustive multi-vector matcher.

Store file (little-endian)::

    b"DREP"  u16 version=1  u8 N  u8 pad  u32 dim  u64 count
    count x ( u64 id, (N+1)*dim f32 )
    u32 CRC32 of everything before it

Vectors are unit-normalised in float64 and then rounded to f32 on write.
Matching accumulates in float64 and divides by the float64 norms of the
stored f32 vectors, so a cosine never depends on how the gallery is split
across threads and agrees with a naive per-entry recomputation.
"""

from __future__ import annotations

import statistics
import struct
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import level_from_h
from .errors import CorruptFile, DimensionMismatch, DuplicateId, InputError, ZeroNorm
from .protocols import replication_ratio

MAGIC = b"DREP"
VERSION = 1
_HEADER = struct.Struct("<4sHBBIQ")
HEADER_SIZE = _HEADER.size  # 20
_ID_MAX = 2**64 - 1


def unit_f32(sets) -> np.ndarray:
    """Normalise every vector to unit length, then round to f32."""
    v = np.asarray(sets, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ZeroNorm("cannot normalise a zero-norm vector")
    return (v / n).astype(np.float32)


@dataclass
class EmbeddingStore:
    """In-memory gallery. ``vectors`` is ``(count, N+1, dim)`` f32, unit rows."""

    N: int
    dim: int
    ids: np.ndarray
    vectors: np.ndarray
    _v64: np.ndarray = field(init=False, repr=False)
    _norms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.uint64)
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.shape != (len(self.ids), self.N + 1, self.dim):
            raise DimensionMismatch(
                f"vectors shaped {self.vectors.shape}, expected ({len(self.ids)}, {self.N + 1}, {self.dim})")
        self._v64 = self.vectors.astype(np.float64)
        self._norms = np.sqrt(np.einsum("ekd,ekd->ek", self._v64, self._v64))

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_sets(cls, ids, sets) -> "EmbeddingStore":
        ids = list(ids)
        sets = np.asarray(sets, dtype=np.float64)
        if sets.ndim != 3:
            if len(ids) == 0:
                raise InputError("an empty store needs N and dim; use EmbeddingStore.empty")
            raise DimensionMismatch(f"vector sets must be (count, N+1, dim), got {sets.shape}")
        if len(ids) != len(sets):
            raise InputError(f"{len(ids)} ids for {len(sets)} vector sets")
        for i in ids:
            if isinstance(i, bool) or int(i) != i or not 0 <= int(i) <= _ID_MAX:
                raise InputError(f"gallery id {i!r} is not a 64-bit unsigned integer")
        ids = np.array([int(i) for i in ids], dtype=np.uint64)
        uniq, counts = np.unique(ids, return_counts=True)
        if np.any(counts > 1):
            raise DuplicateId(f"duplicate gallery id {int(uniq[counts > 1][0])}")
        return cls(sets.shape[1] - 1, sets.shape[2], ids, unit_f32(sets))

    @classmethod
    def empty(cls, N: int, dim: int) -> "EmbeddingStore":
        return cls(N, dim, np.zeros(0, np.uint64), np.zeros((0, N + 1, dim), np.float32))

    def cosines(self, query, threads: int = 1) -> np.ndarray:
        """``(count, N+1)`` cosines between a query set and every entry."""
        q = unit_f32(query).astype(np.float64)
        if q.shape != (self.N + 1, self.dim):
            raise DimensionMismatch(f"query shaped {q.shape}, store holds ({self.N + 1}, {self.dim})")
        qn = np.sqrt(np.sum(q * q, axis=-1))

        def part(lo, hi):
            dots = np.einsum("ekd,kd->ek", self._v64[lo:hi], q)
            return np.clip(dots / (self._norms[lo:hi] * qn), -1.0, 1.0)

        n = len(self)
        threads = max(1, int(threads))
        if threads == 1 or n < 2 * threads:
            return part(0, n)
        bounds = np.linspace(0, n, threads + 1).astype(int)
        with ThreadPoolExecutor(threads) as pool:
            chunks = list(pool.map(part, bounds[:-1], bounds[1:]))
        return np.concatenate(chunks)


@dataclass(frozen=True)
class MatchResult:
    gallery_id: int
    level: int
    h: tuple
    peak: float

    def to_dict(self) -> dict:
        return {"gallery_id": self.gallery_id, "level": self.level, "peak": self.peak,
                "h": list(self.h)}


# ----------------------------------------------------------------------------
# files


def dumps_store(store: EmbeddingStore) -> bytes:
    if not 1 <= store.N <= 255:
        raise InputError(f"N={store.N} does not fit the u8 header field")
    rec = np.dtype([("id", "<u8"), ("v", "<f4", ((store.N + 1) * store.dim,))])
    table = np.empty(len(store), dtype=rec)
    table["id"] = store.ids
    table["v"] = store.vectors.reshape(len(store), (store.N + 1) * store.dim)
    body = _HEADER.pack(MAGIC, VERSION, store.N, 0, store.dim, len(store)) + table.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def build_store(ids, sets, path=None, N: int | None = None, dim: int | None = None) -> EmbeddingStore:
    """Normalise ``sets``, write them to ``path`` (if given) and return the store.

    ``N`` and ``dim`` are only needed when ``sets`` is empty.
    """
    if len(ids) == 0 and len(sets) == 0:
        if N is None or dim is None:
            raise InputError("an empty store needs N and dim")
        store = EmbeddingStore.empty(N, dim)
    else:
        store = EmbeddingStore.from_sets(ids, sets)
    if path is not None:
        Path(path).write_bytes(dumps_store(store))
    return store


def loads_store(data: bytes, source="store") -> EmbeddingStore:
    if len(data) < HEADER_SIZE + 4:
        raise CorruptFile(f"{source}: too short for a store")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptFile(f"{source}: CRC mismatch")
    magic, version, N, _, dim, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptFile(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise CorruptFile(f"{source}: unsupported version {version}")
    rec = np.dtype([("id", "<u8"), ("v", "<f4", ((N + 1) * dim,))])
    if len(data) != HEADER_SIZE + count * rec.itemsize + 4:
        raise CorruptFile(f"{source}: size does not match count={count}")
    table = np.frombuffer(data, dtype=rec, count=count, offset=HEADER_SIZE)
    vectors = table["v"].reshape(count, N + 1, dim).astype(np.float32)
    return EmbeddingStore(N, dim, table["id"].astype(np.uint64), vectors)


def read_store(path) -> EmbeddingStore:
    return loads_store(Path(path).read_bytes(), source=str(path))


def store_file_size(count: int, N: int, dim: int) -> int:
    return HEADER_SIZE + count * (8 + (N + 1) * dim * 4) + 4


# ----------------------------------------------------------------------------
# matching


def rank(ids, h, min_level: int = 0, top_k: int | None = None) -> list[MatchResult]:
    """Rank candidates by (level desc, peak desc, id asc), keeping ``level >= min_level``."""
    h = np.asarray(h, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.uint64)
    if len(ids) == 0:
        return []
    j = level_from_h(h)
    peak = h[np.arange(len(h)), j]
    keep = np.flatnonzero(j >= min_level)
    order = keep[np.lexsort((ids[keep], -peak[keep], -j[keep]))]
    if top_k is not None:
        order = order[:top_k]
    return [MatchResult(int(ids[i]), int(j[i]), tuple(float(x) for x in h[i]), float(peak[i]))
            for i in order]


def match_one(query, store: EmbeddingStore, min_level: int = 0, top_k: int | None = None,
              threads: int = 1) -> list[MatchResult]:
    """All gallery entries whose predicted level against ``query`` is at least ``min_level``."""
    return rank(store.ids, store.cosines(query, threads), min_level, top_k)


def time_match(store: EmbeddingStore, query, min_pairs: int = 100_000, threads: int = 1,
               repeats: int = 7) -> float:
    """Median seconds per (query, entry) pair over ``repeats`` timed batches,
    each batch covering at least ``min_pairs / repeats`` pairs. One untimed
    warm-up call precedes the measurement."""
    if len(store) == 0:
        raise InputError("cannot time matching against an empty store")
    per_batch = max(1, -(-min_pairs // repeats))
    calls = max(1, -(-per_batch // len(store)))
    store.cosines(query, threads)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(calls):
            level_from_h(store.cosines(query, threads))
        samples.append((time.perf_counter() - t0) / (calls * len(store)))
    return statistics.median(samples)


def scan(queries, store: EmbeddingStore, threshold: int = 4, threads: int = 1,
         encode_s_per_img: float | None = None, time_pairs: int = 100_000) -> dict:
    """Best match per query, the replication ratio at ``threshold`` and timings.

    ``queries`` is ``(n, N+1, dim)``. Encoding happens outside this function,
    so its per-image cost is passed in when known.
    """
    if len(store) == 0:
        raise InputError("cannot scan against an empty store")
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 3 or len(queries) == 0:
        raise InputError("scan needs a nonempty (n, N+1, dim) array of query sets")
    t0 = time.perf_counter()
    best = [match_one(q, store, 0, top_k=1, threads=threads)[0] for q in queries]
    scan_seconds = time.perf_counter() - t0
    levels = [b.level for b in best]
    timing = {
        "match_s_per_pair": time_match(store, queries[0], time_pairs, threads),
        "match_method": f"median of 7 warm batches, >= {time_pairs} pairs total, monotonic clock",
        "scan_wall_s": scan_seconds,
    }
    if encode_s_per_img is not None:
        timing["encode_s_per_img"] = encode_s_per_img
    return {
        "threshold": threshold,
        "n_queries": len(queries),
        "gallery_size": len(store),
        "replication_ratio": replication_ratio(levels, threshold),
        "best": [b.to_dict() for b in best],
        "timing": timing,
    }
