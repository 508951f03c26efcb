"""Decode-step attention over a prefilled cache plus a hot generation window.

Each step embeds one token, and per (layer, head): appends the token's key and
value to the generation window, retrieves the k best-scoring cache entries
through that head's index, fetches exactly those value rows from the cold
tier, and softmaxes the retrieved scores jointly with the window scores. The
working set per step is O(k + n_generated) rows regardless of cache length,
which the TierAccounting counters make checkable.

The joint softmax over [context scores, window scores] reduces exactly to
dense attention when k covers the whole cache. An "additive" combine mode
(two independently normalized softmaxes summed) is kept selectable for
comparison; it double-normalizes and cannot match dense attention.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .ann import IndexSet, MipsIndex, knn_search
from .budget import LayerBudget
from .cache import CacheFile, KvCache
from .errors import ConfigError, InputError
from .model import TinyModel, _mm, _silu, rmsnorm, rotary_apply, sample_token
from .tensor import DTYPE, child_rng

logger = logging.getLogger(__name__)

SCORE_BYTES = 4
VALUE_ROW_BYTES = lambda d: (d + 1) * SCORE_BYTES  # noqa: E731  value row + its score


@dataclass
class TierAccounting:
    """Per-step movement counters between the cold cache tier and the hot tier."""

    cold_reads: int = 0
    hot_ops: int = 0
    bytes_moved: int = 0

    def snapshot(self) -> dict:
        return {
            "cold_reads": self.cold_reads,
            "hot_ops": self.hot_ops,
            "bytes_moved": self.bytes_moved,
        }


class ValueTier:
    """Cold-tier accessor over a KvCache (RAM) or CacheFile (disk)."""

    def __init__(self, source):
        self.source = source
        self.meta = source.meta
        self._in_memory = isinstance(source, KvCache)

    def fetch_values(self, layer: int, head: int, ids: np.ndarray) -> np.ndarray:
        if self._in_memory:
            return self.source.values[layer, head, ids]
        return self.source.read_row_ids(layer, head, "values", ids)

    def keys_tail(self, layer: int, head: int, start: int, count: int) -> np.ndarray:
        if self._in_memory:
            return self.source.keys[layer, head, start : start + count]
        return self.source.read_rows(layer, head, "keys", start, count)

    def values_tail(self, layer: int, head: int, start: int, count: int) -> np.ndarray:
        if self._in_memory:
            return self.source.values[layer, head, start : start + count]
        return self.source.read_rows(layer, head, "values", start, count)


class GenWindow:
    """Keys/values of tokens generated so far, one slab per (layer, head).

    Never truncated: every generated token attends to all previous generated
    tokens exactly.
    """

    def __init__(self, n_layers: int, n_heads: int, head_dim: int, capacity: int):
        shape = (n_layers, n_heads, capacity, head_dim)
        self.keys = np.zeros(shape, dtype=DTYPE)
        self.values = np.zeros(shape, dtype=DTYPE)
        self._fill = np.zeros(n_layers, dtype=np.int64)
        self.capacity = capacity

    @property
    def n_gen(self) -> int:
        return int(self._fill[0])

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        pos = self._fill[layer]
        if pos >= self.capacity:
            raise InputError("generation window capacity exceeded")
        self.keys[layer, :, pos] = k
        self.values[layer, :, pos] = v
        self._fill[layer] = pos + 1

    def slab(self, layer: int, head: int) -> tuple[np.ndarray, np.ndarray]:
        n = self._fill[layer]
        return self.keys[layer, head, :n], self.values[layer, head, :n]


def _joint_attend(s_ctx, v_ctx, s_gen, v_gen, combine: str) -> np.ndarray:
    """Softmax-weighted value mix; scores already scaled, float64 throughout."""
    if combine == "joint":
        scores = np.concatenate([s_ctx, s_gen])
        scores = scores - scores.max()
        w = np.exp(scores)
        num = w[: len(s_ctx)] @ v_ctx + w[len(s_ctx) :] @ v_gen
        return (num / w.sum()).astype(DTYPE)
    if combine == "additive":
        out = np.zeros(v_ctx.shape[1] if len(v_ctx) else v_gen.shape[1])
        for s, v in ((s_ctx, v_ctx), (s_gen, v_gen)):
            if len(s):
                e = np.exp(s - s.max())
                out = out + (e @ v) / e.sum()
        return out.astype(DTYPE)
    raise ConfigError(f"unknown combine mode {combine!r}")


def topk_attend(
    q: np.ndarray,
    index: MipsIndex,
    fetch_values,
    win_keys: np.ndarray,
    win_values: np.ndarray,
    k: int,
    accounting: TierAccounting,
    ef_search: int | None = None,
    combine: str = "joint",
    pinned_prefix: int = 0,
    retrieval_log: list | None = None,
) -> np.ndarray:
    """One head's attention output over retrieved cache rows plus the window.

    fetch_values(ids) -> (len(ids), d) is the only touch on the cold tier;
    retrieved scores are recomputed from the index's resident keys, never
    taken from an approximate structure.
    """
    if k < 1:
        raise InputError("k must be >= 1")
    d = index.dim
    if k > index.n_keys:
        logger.warning("k=%d exceeds cache size %d; clamping", k, index.n_keys)
        k = index.n_keys
    res = knn_search(index, q, k, ef_search)
    ids = res.ids
    if pinned_prefix > 0:
        pinned = np.arange(min(pinned_prefix, index.n_keys), dtype=np.int64)
        ids = np.unique(np.concatenate([pinned, ids]))
    if retrieval_log is not None:
        retrieval_log.append(ids)

    q64 = q.astype(np.float64)
    scale = 1.0 / np.sqrt(d)
    s_ctx = (index.row_keys(ids).astype(np.float64) @ q64) * scale
    v_ctx = fetch_values(ids).astype(np.float64)
    accounting.cold_reads += len(ids)
    accounting.bytes_moved += len(ids) * VALUE_ROW_BYTES(d)

    s_gen = (win_keys.astype(np.float64) @ q64) * scale
    accounting.hot_ops += len(s_gen)
    return _joint_attend(s_ctx, v_ctx, s_gen, win_values.astype(np.float64), combine)


def decode_step(
    model: TinyModel,
    token: int,
    indices: IndexSet,
    values: ValueTier,
    win: GenWindow,
    budget: LayerBudget,
    accounting: TierAccounting | None = None,
    ef_search: int | None = None,
    combine: str = "joint",
    pinned_prefix: int = 0,
    retrieval_hook=None,
) -> tuple[np.ndarray, TierAccounting]:
    """Advance one token through all layers; returns next-token logits.

    The token's absolute position (for rotary) continues the prefilled
    context: cache rows occupy positions [0, N), generated tokens follow.
    """
    cfg = model.cfg
    meta = indices.meta
    if budget.n_layers != cfg.n_layers:
        raise ConfigError(f"budget has {budget.n_layers} layers, model has {cfg.n_layers}")
    if values.meta.meta_hash() != indices.meta_hash:
        raise ConfigError("cache and index belong to different artifacts")
    if not 0 <= token < cfg.vocab:
        raise InputError(f"token id {token} out of vocab")

    acct = accounting if accounting is not None else TierAccounting()
    H, d = cfg.n_heads, cfg.head_dim
    pos = np.array([meta.n_tokens + win.n_gen])

    h_res = model.embedding[token].copy()
    for l, lw in enumerate(model.layers):
        x = rmsnorm(h_res[None, :], lw.g_attn)
        q = _mm(x, lw.wq).reshape(1, H, d).transpose(1, 0, 2)
        k = _mm(x, lw.wk).reshape(1, H, d).transpose(1, 0, 2)
        v = _mm(x, lw.wv).reshape(1, H, d).transpose(1, 0, 2)
        if model.rotary_freqs is not None:
            q = rotary_apply(q, pos, model.rotary_freqs)
            k = rotary_apply(k, pos, model.rotary_freqs)
        win.append(l, k[:, 0], v[:, 0])

        merged = np.empty((H, d), dtype=DTYPE)
        for head in range(H):
            win_k, win_v = win.slab(l, head)
            log = [] if retrieval_hook is not None else None
            merged[head] = topk_attend(
                q[head, 0],
                indices.index(l, head),
                lambda ids, l=l, head=head: values.fetch_values(l, head, ids),
                win_k,
                win_v,
                budget[l],
                acct,
                ef_search=ef_search,
                combine=combine,
                pinned_prefix=pinned_prefix,
                retrieval_log=log,
            )
            if retrieval_hook is not None:
                retrieval_hook(l, head, log[0])
        h_res = h_res + _mm(merged.reshape(1, H * d), lw.wo)[0]
        x2 = rmsnorm(h_res[None, :], lw.g_mlp)
        h_res = h_res + _mm(_silu(_mm(x2, lw.w_up)), lw.w_down)[0]

    logits = _mm(rmsnorm(h_res[None, :], model.g_final), model.unembed)[0]
    return logits, acct


def generate(
    model: TinyModel,
    values: ValueTier,
    indices: IndexSet,
    budget: LayerBudget,
    n_max: int,
    seed_tokens,
    sampler: str = "greedy",
    temperature: float = 1.0,
    sample_seed: int = 0,
    ef_search: int | None = None,
    combine: str = "joint",
    pinned_prefix: int = 0,
    retrieval_hook=None,
) -> tuple[list[int], list[dict]]:
    """Autoregressive decoding; returns (sampled tokens, per-step accounting).

    seed_tokens are force-fed first (the prompt's trailing token, plus any
    probe tokens that should run against the prefilled cache); they enter the
    generation window like sampled tokens, without re-prefilling. n_max is
    the number of tokens sampled after the seeds.
    """
    if n_max < 1:
        raise InputError("n_max must be >= 1")
    seeds = [int(t) for t in seed_tokens]
    if not seeds:
        raise InputError("need at least one seed token to start decoding")
    win = GenWindow(
        model.cfg.n_layers, model.cfg.n_heads, model.cfg.head_dim, len(seeds) + n_max
    )
    rng = child_rng(sample_seed, 0xD5)
    out: list[int] = []
    steps: list[dict] = []
    token = seeds[0]
    pending = seeds[1:]
    step = 0
    while len(out) < n_max:
        acct = TierAccounting()
        hook = None
        if retrieval_hook is not None:
            hook = lambda l, h, ids, step=step: retrieval_hook(step, l, h, ids)
        logits, _ = decode_step(
            model, token, indices, values, win, budget,
            accounting=acct, ef_search=ef_search, combine=combine,
            pinned_prefix=pinned_prefix, retrieval_hook=hook,
        )
        steps.append(
            {"step": step, **acct.snapshot(), "per_layer_k": list(budget.k_per_layer)}
        )
        if pending:
            token = pending.pop(0)
        else:
            token = sample_token(logits, sampler, rng, temperature)
            out.append(token)
        step += 1
    return out, steps


# ---------------------------------------------------------------------------
# Sliding-window reference decode (no retrieval): the cache-eviction baseline
# the needle grid compares against. Attends to the last `window` cache rows,
# an optional pinned prefix of early rows, and the generation window.
# ---------------------------------------------------------------------------


def window_decode_step(
    model: TinyModel,
    token: int,
    values: ValueTier,
    win: GenWindow,
    window: int,
    accounting: TierAccounting | None = None,
    pinned_prefix: int = 0,
    attended_hook=None,
) -> tuple[np.ndarray, TierAccounting]:
    cfg = model.cfg
    meta = values.meta
    if window < 1:
        raise InputError("window must be >= 1")
    acct = accounting if accounting is not None else TierAccounting()
    H, d = cfg.n_heads, cfg.head_dim
    n = meta.n_tokens
    tail_start = max(0, n - window)
    scale = 1.0 / np.sqrt(d)
    pos = np.array([n + win.n_gen])

    h_res = model.embedding[token].copy()
    for l, lw in enumerate(model.layers):
        x = rmsnorm(h_res[None, :], lw.g_attn)
        q = _mm(x, lw.wq).reshape(1, H, d).transpose(1, 0, 2)
        k = _mm(x, lw.wk).reshape(1, H, d).transpose(1, 0, 2)
        v = _mm(x, lw.wv).reshape(1, H, d).transpose(1, 0, 2)
        if model.rotary_freqs is not None:
            q = rotary_apply(q, pos, model.rotary_freqs)
            k = rotary_apply(k, pos, model.rotary_freqs)
        win.append(l, k[:, 0], v[:, 0])

        merged = np.empty((H, d), dtype=DTYPE)
        for head in range(H):
            parts_k, parts_v, attended = [], [], []
            if pinned_prefix > 0:
                p = min(pinned_prefix, tail_start)
                if p > 0:
                    parts_k.append(values.keys_tail(l, head, 0, p))
                    parts_v.append(values.values_tail(l, head, 0, p))
                    attended.append(np.arange(p))
            count = n - tail_start
            parts_k.append(values.keys_tail(l, head, tail_start, count))
            parts_v.append(values.values_tail(l, head, tail_start, count))
            attended.append(np.arange(tail_start, n))
            ctx_k = np.concatenate(parts_k)
            ctx_v = np.concatenate(parts_v)
            acct.cold_reads += len(ctx_k)
            acct.bytes_moved += len(ctx_k) * 2 * d * SCORE_BYTES  # keys and values move
            if attended_hook is not None:
                attended_hook(l, head, np.concatenate(attended))

            q64 = q[head, 0].astype(np.float64)
            s_ctx = (ctx_k.astype(np.float64) @ q64) * scale
            win_k, win_v = win.slab(l, head)
            s_gen = (win_k.astype(np.float64) @ q64) * scale
            acct.hot_ops += len(s_gen)
            merged[head] = _joint_attend(
                s_ctx, ctx_v.astype(np.float64), s_gen, win_v.astype(np.float64), "joint"
            )
        h_res = h_res + _mm(merged.reshape(1, H * d), lw.wo)[0]
        x2 = rmsnorm(h_res[None, :], lw.g_mlp)
        h_res = h_res + _mm(_silu(_mm(x2, lw.w_up)), lw.w_down)[0]

    logits = _mm(rmsnorm(h_res[None, :], model.g_final), model.unembed)[0]
    return logits, acct
