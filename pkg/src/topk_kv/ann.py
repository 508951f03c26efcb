"""Top-k maximum-inner-product search over one head's keys.

Two index kinds share one query contract: "flat" scans every key and is
oracle-grade (exact top-k, ties to the lower row index); "graph" is an
approximate navigable-small-world structure whose recall is governed by the
search beam width. Either way the returned scores are exact recomputed dot
products; approximation only ever affects which candidates are considered.

Per-query distance-evaluation counts are tracked on the index so scaling
claims can be asserted on counters instead of wall time.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .ann_kernels import build_graph, graph_search, ip_score, ip_scores_all
from .cache import CacheFile, CacheMeta, KvCache
from .errors import ConfigError, FormatError, InputError, ShapeError
from .tensor import DTYPE, as_matrix, as_vector, child_rng

INDEX_MAGIC = b"TKIX"
INDEX_VERSION = 1
_KIND_CODES = {"flat": 0, "graph": 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


@dataclass(frozen=True)
class GraphParams:
    max_degree: int = 16
    ef_construction: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.max_degree < 1 or self.ef_construction < 1:
            raise InputError("graph params must be positive")


def default_ef_search(k: int) -> int:
    return max(64, 2 * k)


@dataclass(frozen=True)
class TopKResult:
    """Scores (descending) and the cache rows they belong to."""

    vals: np.ndarray  # float32
    ids: np.ndarray  # int64

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class MipsIndex:
    kind: str
    dim: int
    n_keys: int
    keys: np.ndarray | None  # full key matrix (flat; graph shares or drops it)
    params: GraphParams | None = None
    node_keys: np.ndarray | None = None  # distinct key values the graph walks
    neighbors: np.ndarray | None = None
    n_neighbors: np.ndarray | None = None
    entry: int = 0
    group_offsets: np.ndarray | None = None  # CSR over rows, one slice per node
    group_rows: np.ndarray | None = None
    row_node: np.ndarray | None = None  # row id -> node id (bucketed only)
    distance_evals: int = 0
    queries: int = 0
    _visited: np.ndarray | None = field(default=None, repr=False)
    _stamp: int = 0

    @property
    def n_nodes(self) -> int:
        return self.n_keys if self.node_keys is None else self.node_keys.shape[0]

    def row_keys(self, ids: np.ndarray) -> np.ndarray:
        """Key rows for cache row ids, for exact score recomputation."""
        if self.row_node is not None:
            return self.node_keys[self.row_node[ids]]
        return (self.keys if self.keys is not None else self.node_keys)[ids]

    def reset_counters(self) -> None:
        self.distance_evals = 0
        self.queries = 0


def _dedupe_rows(k: np.ndarray):
    """Group identical key rows. Returns (node_keys, offsets, rows, row_node)
    or None when all rows are distinct."""
    node_keys, row_node = np.unique(k, axis=0, return_inverse=True)
    row_node = row_node.reshape(-1).astype(np.int32)
    n_unique = node_keys.shape[0]
    if n_unique == k.shape[0]:
        return None
    order = np.argsort(row_node, kind="stable")  # rows ascending within a node
    counts = np.bincount(row_node, minlength=n_unique)
    offsets = np.zeros(n_unique + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return np.ascontiguousarray(node_keys), offsets, order.astype(np.int32), row_node


def build_index(keys, kind: str = "flat", params: GraphParams | None = None) -> MipsIndex:
    """Index one (N, d) key matrix. Graph builds are seeded and deterministic.

    Graph indexes collapse exactly duplicated rows into one node carrying the
    row list; token-determined keys (first layer, no positional encoding)
    otherwise shatter the beam search across thousands of identical points.
    """
    k = as_matrix(keys)
    if k.shape[0] < 1:
        raise InputError("cannot index an empty key matrix")
    n, d = k.shape
    if kind == "flat":
        return MipsIndex("flat", d, n, k)
    if kind != "graph":
        raise InputError(f"unknown index kind {kind!r}")
    p = params or GraphParams()
    grouping = _dedupe_rows(k)
    if grouping is None:
        node_keys, offsets, rows, row_node = k, None, None, None
    else:
        node_keys, offsets, rows, row_node = grouping
    n_nodes = node_keys.shape[0]
    order = child_rng(p.seed, 0xA17).permutation(n_nodes).astype(np.int64)
    neighbors, n_neighbors, entry = build_graph(node_keys, order, p.max_degree, p.ef_construction)
    return MipsIndex(
        "graph", d, n, None if grouping else k,
        params=p, node_keys=node_keys,
        neighbors=neighbors, n_neighbors=n_neighbors, entry=int(entry),
        group_offsets=offsets, group_rows=rows, row_node=row_node,
        _visited=np.zeros(n_nodes, dtype=np.int64),
    )


def reachable_mask(idx: MipsIndex) -> np.ndarray:
    """Which graph nodes the entry point can reach along directed edges."""
    mask = np.zeros(idx.n_nodes, dtype=bool)
    stack = [idx.entry]
    mask[idx.entry] = True
    while stack:
        node = stack.pop()
        for nb in idx.neighbors[node, : idx.n_neighbors[node]]:
            if not mask[nb]:
                mask[nb] = True
                stack.append(int(nb))
    return mask


def _flat_topk(keys: np.ndarray, q: np.ndarray, k: int) -> TopKResult:
    s = ip_scores_all(keys, q)
    n = s.shape[0]
    k = min(k, n)
    if k == n:
        order = np.lexsort((np.arange(n), -s))
    else:
        part = np.argpartition(-s, k - 1)[:k]
        thresh = s[part].min()
        above = np.flatnonzero(s > thresh)
        ties = np.flatnonzero(s == thresh)[: k - above.size]
        cand = np.concatenate([above, ties])
        order = cand[np.lexsort((cand, -s[cand]))]
    return TopKResult(s[order].astype(DTYPE), order.astype(np.int64))


def _graph_query(idx: MipsIndex, q: np.ndarray, ef: int, k: int) -> TopKResult:
    if idx._visited is None:
        idx._visited = np.zeros(idx.n_nodes, dtype=np.int64)
    idx._stamp += 1
    _, nodes, evals = graph_search(
        idx.node_keys, idx.neighbors, idx.n_neighbors, idx.entry, q, ef,
        idx._visited, idx._stamp,
    )
    idx.distance_evals += int(evals)
    idx.queries += 1
    # The beam orders candidates with fastmath dots; returned vals are exact
    # recomputed scores, and the final ordering follows them.
    exact = np.array([ip_score(idx.node_keys, q, int(i)) for i in nodes])
    order = np.lexsort((nodes, -exact))
    nodes, exact = nodes[order], exact[order]
    if idx.group_rows is None:
        return TopKResult(exact[:k].astype(DTYPE), nodes[:k])
    # Bucketed duplicates: expand best nodes into their rows, ascending row
    # ids inside a node, until k rows are collected.
    rows: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    remaining = k
    for node, score in zip(nodes, exact):
        lo, hi = idx.group_offsets[node], idx.group_offsets[node + 1]
        take = min(remaining, int(hi - lo))
        rows.append(idx.group_rows[lo : lo + take].astype(np.int64))
        vals.append(np.full(take, score))
        remaining -= take
        if remaining == 0:
            break
    return TopKResult(np.concatenate(vals).astype(DTYPE), np.concatenate(rows))


def knn_search(idx: MipsIndex, q, k: int, ef_search: int | None = None) -> TopKResult:
    """Top-k rows of the index by inner product with q.

    Flat indexes return the exact answer; graph indexes run a beam search of
    width max(ef_search, k). k larger than the corpus clamps.
    """
    qv = as_vector(q)
    if qv.shape[0] != idx.dim:
        raise ShapeError(f"query dim {qv.shape[0]} != index dim {idx.dim}")
    if k < 1:
        raise InputError("k must be >= 1")
    if idx.kind == "flat":
        res = _flat_topk(idx.keys, qv, k)
        idx.distance_evals += idx.n_keys
        idx.queries += 1
        return res
    k = min(k, idx.n_keys)
    ef = max(ef_search if ef_search is not None else default_ef_search(k), k)
    return _graph_query(idx, qv, min(ef, idx.n_nodes), k)


def recall_at_k(approx: TopKResult, exact: TopKResult) -> float:
    """Fraction of the exact ids the approximate result recovered."""
    if len(exact) == 0:
        raise InputError("exact result is empty")
    hit = np.intersect1d(approx.ids, exact.ids).size
    return hit / len(exact)


# ---------------------------------------------------------------------------
# Per-(layer, head) index collection over a cache
# ---------------------------------------------------------------------------


@dataclass
class IndexSet:
    meta: CacheMeta
    kind: str
    params: GraphParams
    indexes: list  # [layer][head] -> MipsIndex
    meta_hash: bytes

    def index(self, layer: int, head: int) -> MipsIndex:
        return self.indexes[layer][head]

    def reset_counters(self) -> None:
        for row in self.indexes:
            for idx in row:
                idx.reset_counters()

    def counter_totals(self) -> tuple[int, int]:
        evals = sum(i.distance_evals for row in self.indexes for i in row)
        queries = sum(i.queries for row in self.indexes for i in row)
        return evals, queries


def _cache_keys_section(source, layer: int, head: int) -> np.ndarray:
    if isinstance(source, KvCache):
        return source.keys[layer, head]
    return source.read_section(layer, head, "keys")


def _build_graph_section(path: str, layer: int, head: int, params: GraphParams):
    with CacheFile(path) as f:
        keys = f.read_section(layer, head, "keys")
    return layer, head, build_index(keys, "graph", params)


def build_index_set(
    source, kind: str = "flat", params: GraphParams | None = None, workers: int = 1
) -> IndexSet:
    """Build one MipsIndex per (layer, head) over a KvCache or CacheFile.

    Graph insertion order is derived per head from the base seed, so the whole
    set is reproducible from (cache, kind, params) no matter how many workers
    build it. Parallel builds run one process per (layer, head) section and
    need a file-backed cache.
    """
    meta = source.meta
    p = params or GraphParams()
    L, H = meta.n_layers, meta.n_heads
    indexes = [[None] * H for _ in range(L)]

    if kind == "graph" and workers > 1 and isinstance(source, CacheFile):
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(
                    _build_graph_section, source.path, l, h,
                    GraphParams(p.max_degree, p.ef_construction, _head_seed(p.seed, l, h)),
                )
                for l in range(L)
                for h in range(H)
            ]
            for fut in futures:
                l, h, idx = fut.result()
                idx.params = p
                indexes[l][h] = idx
    else:
        for l in range(L):
            for h in range(H):
                keys = _cache_keys_section(source, l, h)
                head_params = GraphParams(p.max_degree, p.ef_construction, _head_seed(p.seed, l, h))
                indexes[l][h] = build_index(keys, kind, head_params if kind == "graph" else None)
    return IndexSet(meta, kind, p, indexes, meta.meta_hash())


def _head_seed(seed: int, layer: int, head: int) -> int:
    return (seed * 1_000_003 + layer * 1009 + head) & 0x7FFFFFFFFFFFFFFF


_IX_HEADER = struct.Struct("<4sIBIIQQQQQ32s")  # magic, ver, kind, M, efc, seed, L, H, N, d, hash
_IX_SECTION = struct.Struct("<QQB")  # n_nodes, entry, bucketed flag


def _graph_section_bytes(idx: MipsIndex) -> int:
    n_nodes = idx.n_nodes
    size = _IX_SECTION.size + 4 * n_nodes + 4 * n_nodes * idx.params.max_degree
    if idx.group_rows is not None:
        size += 8 * (n_nodes + 1) + 4 * idx.n_keys
    return size


def save_index_set(ixs: IndexSet, path) -> None:
    meta = ixs.meta
    header = _IX_HEADER.pack(
        INDEX_MAGIC, INDEX_VERSION, _KIND_CODES[ixs.kind],
        ixs.params.max_degree, ixs.params.ef_construction, ixs.params.seed,
        meta.n_layers, meta.n_heads, meta.n_tokens, meta.head_dim, ixs.meta_hash,
    )
    flat_list = [idx for row in ixs.indexes for idx in row]
    n_sections = len(flat_list)
    sizes = [0 if ixs.kind == "flat" else _graph_section_bytes(i) for i in flat_list]
    offsets = np.zeros(n_sections, dtype=np.uint64)
    base = len(header) + 8 * n_sections
    np.cumsum(sizes[:-1], out=offsets[1:])
    offsets += base
    with open(path, "wb") as f:
        f.write(header)
        f.write(offsets.astype("<u8").tobytes())
        if ixs.kind == "flat":
            return
        for idx in flat_list:
            bucketed = idx.group_rows is not None
            f.write(_IX_SECTION.pack(idx.n_nodes, idx.entry, 1 if bucketed else 0))
            f.write(idx.n_neighbors.astype("<i4").tobytes())
            f.write(idx.neighbors.astype("<i4").tobytes())
            if bucketed:
                f.write(idx.group_offsets.astype("<i8").tobytes())
                f.write(idx.group_rows.astype("<i4").tobytes())


def _read_graph_section(f, at: int, n_rows: int, d: int, m: int, params, keys) -> MipsIndex:
    f.seek(at)

    def take(n: int, what: str) -> bytes:
        blob = f.read(n)
        if len(blob) < n:
            raise FormatError(f"index file truncated in {what}", offset=f.tell())
        return blob

    n_nodes, entry, bucketed = _IX_SECTION.unpack(take(_IX_SECTION.size, "section header"))
    if n_nodes < 1 or n_nodes > n_rows or entry >= n_nodes:
        raise FormatError(f"implausible graph section (n_nodes={n_nodes})", offset=at)
    n_neighbors = np.frombuffer(take(4 * n_nodes, "degrees"), dtype="<i4").copy()
    neighbors = np.frombuffer(take(4 * n_nodes * m, "neighbors"), dtype="<i4").reshape(n_nodes, m).copy()
    offsets = rows = row_node = None
    node_keys = keys
    if bucketed:
        offsets = np.frombuffer(take(8 * (n_nodes + 1), "group offsets"), dtype="<i8").copy()
        rows = np.frombuffer(take(4 * n_rows, "group rows"), dtype="<i4").copy()
        row_node = np.empty(n_rows, dtype=np.int32)
        counts = np.diff(offsets).astype(np.int64)
        row_node[rows] = np.repeat(np.arange(n_nodes, dtype=np.int32), counts)
        node_keys = np.ascontiguousarray(keys[rows[offsets[:-1]]])
        keys = None
    return MipsIndex(
        "graph", d, n_rows, keys, params=params, node_keys=node_keys,
        neighbors=neighbors, n_neighbors=n_neighbors, entry=int(entry),
        group_offsets=offsets, group_rows=rows, row_node=row_node,
        _visited=np.zeros(n_nodes, dtype=np.int64),
    )


def load_index_set(path, cache) -> IndexSet:
    """Load a TKIX file, attaching keys from its paired cache.

    The cache may be a KvCache or an open CacheFile; its meta hash must match
    the one stamped into the index file.
    """
    meta = cache.meta
    with open(path, "rb") as f:
        blob = f.read(_IX_HEADER.size)
        if len(blob) < _IX_HEADER.size:
            raise FormatError("index file truncated in header", offset=len(blob))
        magic, version, kind_code, m, efc, seed, L, H, N, d, meta_hash = _IX_HEADER.unpack(blob)
        if magic != INDEX_MAGIC:
            raise FormatError(f"bad magic {magic!r}", offset=0)
        if version != INDEX_VERSION:
            raise FormatError(f"unsupported index version {version}", offset=4)
        if kind_code not in _KIND_NAMES:
            raise FormatError(f"unknown index kind code {kind_code}", offset=8)
        if (L, H, N, d) != (meta.n_layers, meta.n_heads, meta.n_tokens, meta.head_dim):
            raise ConfigError(
                f"index shape (L={L} H={H} N={N} d={d}) does not match cache meta"
            )
        if meta_hash != meta.meta_hash():
            raise ConfigError("index was built for a different cache (meta hash mismatch)")
        kind = _KIND_NAMES[kind_code]
        params = GraphParams(m, efc, seed) if kind == "graph" else GraphParams()
        n_sections = L * H
        table = np.frombuffer(f.read(8 * n_sections), dtype="<u8")
        if table.size < n_sections:
            raise FormatError("index file truncated in offset table", offset=f.tell())
        indexes = []
        for l in range(L):
            row = []
            for h in range(H):
                keys = _cache_keys_section(cache, l, h)
                if kind == "flat":
                    row.append(MipsIndex("flat", d, N, keys))
                else:
                    row.append(
                        _read_graph_section(f, int(table[l * H + h]), N, d, m, params, keys)
                    )
            indexes.append(row)
    return IndexSet(meta, kind, params, indexes, meta_hash)
