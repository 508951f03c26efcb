"""Numba kernels behind the inner-product search structures.

Everything here is sequential, so builds and searches are reproducible run to
run. The exact-scan kernel accumulates in float64 with a fixed left-to-right
order; the graph kernels use fastmath dots (still deterministic for a given
build) since the graph only proposes candidates and scores are recomputed
exactly outside.

The graph is a single-layer navigable-small-world structure specialised for
maximum inner product: nodes are inserted in a seeded random order, each
linked to the best beam-search results over the partial graph, with reverse
edges pruned back to the strongest. Inner-product pruning concentrates
in-edges on large-norm hubs, which can strand weak nodes entirely, so the
last neighbor slot of every node is reserved for a circular chain in
insertion order. The chain guarantees every node stays reachable from the
entry point (the largest-norm node, which inner-product search naturally
favors) at the cost of one degree slot.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# Candidate-pool capacity per search. Beam search visits a few hundred nodes
# at practical ef values; overflow beyond this only drops already-beaten
# candidates (guarded in _beam_search).
_CAND_CAP = 1 << 15


@njit(cache=True)
def ip_score(keys, q, i):
    """Strict float64 left-to-right dot; the exact-scan scorer."""
    s = 0.0
    for j in range(q.shape[0]):
        s += np.float64(keys[i, j]) * np.float64(q[j])
    return s


@njit(cache=True)
def ip_scores_all(keys, q):
    """Inner product of q with every key row, float64 accumulation."""
    n = keys.shape[0]
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        out[i] = ip_score(keys, q, i)
    return out


@njit(cache=True, fastmath=True)
def _ip_fast(keys, q, i):
    s = 0.0
    for j in range(q.shape[0]):
        s += np.float64(keys[i, j]) * np.float64(q[j])
    return s


# -- binary heaps on parallel arrays ----------------------------------------
# "worse" means lower score, ties broken so that the higher id is worse; the
# min-heap root is therefore the entry to evict first.


@njit(cache=True, inline="always")
def _worse(s_a, i_a, s_b, i_b):
    if s_a != s_b:
        return s_a < s_b
    return i_a > i_b


@njit(cache=True)
def _min_push(scores, ids, size, s, i):
    pos = size
    scores[pos] = s
    ids[pos] = i
    while pos > 0:
        parent = (pos - 1) >> 1
        if _worse(scores[pos], ids[pos], scores[parent], ids[parent]):
            scores[pos], scores[parent] = scores[parent], scores[pos]
            ids[pos], ids[parent] = ids[parent], ids[pos]
            pos = parent
        else:
            break
    return size + 1


@njit(cache=True)
def _min_pop(scores, ids, size):
    size -= 1
    scores[0] = scores[size]
    ids[0] = ids[size]
    pos = 0
    while True:
        left = 2 * pos + 1
        right = left + 1
        smallest = pos
        if left < size and _worse(scores[left], ids[left], scores[smallest], ids[smallest]):
            smallest = left
        if right < size and _worse(scores[right], ids[right], scores[smallest], ids[smallest]):
            smallest = right
        if smallest == pos:
            return size
        scores[pos], scores[smallest] = scores[smallest], scores[pos]
        ids[pos], ids[smallest] = ids[smallest], ids[pos]
        pos = smallest


@njit(cache=True)
def _max_push(scores, ids, size, s, i):
    pos = size
    scores[pos] = s
    ids[pos] = i
    while pos > 0:
        parent = (pos - 1) >> 1
        if _worse(scores[parent], ids[parent], scores[pos], ids[pos]):
            scores[pos], scores[parent] = scores[parent], scores[pos]
            ids[pos], ids[parent] = ids[parent], ids[pos]
            pos = parent
        else:
            break
    return size + 1


@njit(cache=True)
def _max_pop(scores, ids, size):
    size -= 1
    scores[0] = scores[size]
    ids[0] = ids[size]
    pos = 0
    while True:
        left = 2 * pos + 1
        right = left + 1
        largest = pos
        if left < size and _worse(scores[largest], ids[largest], scores[left], ids[left]):
            largest = left
        if right < size and _worse(scores[largest], ids[largest], scores[right], ids[right]):
            largest = right
        if largest == pos:
            return size
        scores[pos], scores[largest] = scores[largest], scores[pos]
        ids[pos], ids[largest] = ids[largest], ids[pos]
        pos = largest


@njit(cache=True)
def _beam_search(
    keys,
    neighbors,
    n_neighbors,
    entry,
    q,
    ef,
    visited,
    stamp,
    cand_scores,
    cand_ids,
    res_scores,
    res_ids,
):
    """Best-first beam search maximizing dot(q, key).

    Returns (result size, distance evaluations). Results are left in the
    res_* min-heap arrays, not yet sorted.
    """
    visited[entry] = stamp
    s = _ip_fast(keys, q, entry)
    evals = 1
    cand_size = _max_push(cand_scores, cand_ids, 0, s, entry)
    res_size = _min_push(res_scores, res_ids, 0, s, entry)

    while cand_size > 0:
        best_s = cand_scores[0]
        best_i = cand_ids[0]
        if res_size >= ef and _worse(best_s, best_i, res_scores[0], res_ids[0]):
            break
        cand_size = _max_pop(cand_scores, cand_ids, cand_size)
        for jj in range(n_neighbors[best_i]):
            nb = neighbors[best_i, jj]
            if visited[nb] == stamp:
                continue
            visited[nb] = stamp
            sn = _ip_fast(keys, q, nb)
            evals += 1
            if res_size < ef:
                res_size = _min_push(res_scores, res_ids, res_size, sn, nb)
                if cand_size < cand_scores.shape[0]:
                    cand_size = _max_push(cand_scores, cand_ids, cand_size, sn, nb)
            elif _worse(res_scores[0], res_ids[0], sn, nb):
                res_size = _min_pop(res_scores, res_ids, res_size)
                res_size = _min_push(res_scores, res_ids, res_size, sn, nb)
                if cand_size < cand_scores.shape[0]:
                    cand_size = _max_push(cand_scores, cand_ids, cand_size, sn, nb)
    return res_size, evals


@njit(cache=True)
def _drain_sorted(res_scores, res_ids, res_size):
    """Empty a result min-heap into descending score order (ties: lower id)."""
    out_scores = np.empty(res_size, dtype=np.float64)
    out_ids = np.empty(res_size, dtype=np.int64)
    size = res_size
    for pos in range(res_size - 1, -1, -1):
        out_scores[pos] = res_scores[0]
        out_ids[pos] = res_ids[0]
        size = _min_pop(res_scores, res_ids, size)
    return out_scores, out_ids


@njit(cache=True)
def graph_search(keys, neighbors, n_neighbors, entry, q, ef, visited, stamp):
    """One query over a built graph; returns (scores desc, ids, evals)."""
    cand_scores = np.empty(_CAND_CAP, dtype=np.float64)
    cand_ids = np.empty(_CAND_CAP, dtype=np.int64)
    res_scores = np.empty(ef + 1, dtype=np.float64)
    res_ids = np.empty(ef + 1, dtype=np.int64)
    res_size, evals = _beam_search(
        keys, neighbors, n_neighbors, entry, q, ef, visited, stamp,
        cand_scores, cand_ids, res_scores, res_ids,
    )
    scores, ids = _drain_sorted(res_scores, res_ids, res_size)
    return scores, ids, evals


@njit(cache=True)
def build_graph(keys, order, max_degree, ef_construction):
    """Insert nodes in `order`, wiring each to its beam-search neighbors.

    Slot 0 of every node holds the insertion-order chain edge (circular),
    which keeps the whole graph reachable from any node; slots 1.. hold
    beam-selected links, chosen with an occlusion rule (a candidate already
    better served by a selected neighbor is skipped, then leftover slots are
    filled best-first) and pruned by inner product to the owning node when
    full. Returns (neighbors, n_neighbors, entry) with the entry point at the
    largest-norm node (ties keep the earlier insertion).
    """
    n, d = keys.shape
    neighbors = np.full((n, max_degree), -1, dtype=np.int32)
    n_neighbors = np.zeros(n, dtype=np.int32)
    visited = np.zeros(n, dtype=np.int64)

    cand_scores = np.empty(_CAND_CAP, dtype=np.float64)
    cand_ids = np.empty(_CAND_CAP, dtype=np.int64)
    res_scores = np.empty(ef_construction + 1, dtype=np.float64)
    res_ids = np.empty(ef_construction + 1, dtype=np.int64)
    sel = np.empty(max_degree, dtype=np.int64)

    entry = order[0]
    entry_norm = _ip_fast(keys, keys[entry], entry)
    # A lone node's chain edge points at itself until its successor arrives.
    neighbors[entry, 0] = entry
    n_neighbors[entry] = 1
    stamp = 0

    for t in range(1, n):
        new = order[t]
        stamp += 1
        res_size, _ = _beam_search(
            keys, neighbors, n_neighbors, entry, keys[new], ef_construction,
            visited, stamp, cand_scores, cand_ids, res_scores, res_ids,
        )
        scores, ids = _drain_sorted(res_scores, res_ids, res_size)
        quality = max_degree - 1
        n_sel = 0
        for j in range(res_size):  # occlusion pass, candidates best-first
            if n_sel >= quality:
                break
            c = ids[j]
            keep = True
            for jj in range(n_sel):
                if _ip_fast(keys, keys[c], sel[jj]) >= scores[j]:
                    keep = False
                    break
            if keep:
                sel[n_sel] = c
                n_sel += 1
        if n_sel < min(quality, res_size):  # top up with skipped candidates
            for j in range(res_size):
                if n_sel >= quality:
                    break
                c = ids[j]
                dup = False
                for jj in range(n_sel):
                    if sel[jj] == c:
                        dup = True
                        break
                if not dup:
                    sel[n_sel] = c
                    n_sel += 1

        neighbors[new, 0] = order[0]  # provisional cycle closure
        neighbors[order[t - 1], 0] = new
        for j in range(n_sel):
            neighbors[new, 1 + j] = sel[j]
        n_neighbors[new] = 1 + n_sel

        # Reverse edges into slots 1..; full lists evict their weakest link
        # if `new` beats it (the slot-0 chain edge is never touched).
        for j in range(n_sel):
            nb = sel[j]
            cnt = n_neighbors[nb]
            if cnt < max_degree:
                neighbors[nb, cnt] = new
                n_neighbors[nb] = cnt + 1
            else:
                s_new = _ip_fast(keys, keys[nb], new)
                worst = 1
                s_worst = _ip_fast(keys, keys[nb], neighbors[nb, 1])
                for jj in range(2, max_degree):
                    s_jj = _ip_fast(keys, keys[nb], neighbors[nb, jj])
                    if _worse(s_jj, neighbors[nb, jj], s_worst, neighbors[nb, worst]):
                        worst = jj
                        s_worst = s_jj
                if _worse(s_worst, neighbors[nb, worst], s_new, new):
                    neighbors[nb, worst] = new

        norm = _ip_fast(keys, keys[new], new)
        if norm > entry_norm:
            entry = new
            entry_norm = norm

    return neighbors, n_neighbors, entry