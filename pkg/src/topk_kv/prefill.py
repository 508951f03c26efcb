"""Chunked prefill: populate a KV cache sink while bounding peak memory.

Tokens stream through the model in chunks of `chunk_rows`. Attention of each
chunk over the already-emitted history is computed with an online softmax over
fixed-size history blocks read back from the sink, so live activations stay
O(chunk_rows * D) regardless of context length.

Modes: "exact" attends to the full history (bit-compatible with a monolithic
forward pass up to float32 rounding); "windowed" restricts each query to the
previous `window` positions, trading exactness for O(N * window) prefill cost
at the million-token scale.
"""

from __future__ import annotations

import numpy as np

from .cache import CacheChunk, CacheMeta
from .errors import InputError
from .model import TinyModel, _mm, _silu, rmsnorm, rotary_apply, validate_tokens
from .tensor import DTYPE

NEG_INF = -np.inf


class _OnlineAttention:
    """Streaming softmax-weighted sum over score blocks, float64 state."""

    def __init__(self, n_heads: int, n_queries: int, head_dim: int):
        self.m = np.full((n_heads, n_queries), NEG_INF)
        self.den = np.zeros((n_heads, n_queries))
        self.acc = np.zeros((n_heads, n_queries, head_dim))

    def update(self, scores: np.ndarray, values: np.ndarray) -> None:
        """scores: (H, C, B) float64, masked entries -inf; values: (H, B, d)."""
        bm = np.maximum(self.m, scores.max(axis=-1))
        safe = np.where(np.isfinite(bm), bm, 0.0)
        rescale = np.where(np.isfinite(self.m), np.exp(self.m - safe), 0.0)
        w = np.exp(scores - safe[..., None])
        self.den = self.den * rescale + w.sum(axis=-1)
        self.acc = self.acc * rescale[..., None] + w @ values.astype(np.float64)
        self.m = bm

    def finish(self) -> np.ndarray:
        if (self.den == 0).any():
            raise InputError("a query row attended to nothing")
        return (self.acc / self.den[..., None]).astype(DTYPE)


def prefill_chunked(
    model: TinyModel,
    tokens,
    chunk_rows: int,
    sink,
    mode: str = "exact",
    window: int | None = None,
    history_block: int | None = None,
) -> CacheMeta:
    """Run the prompt through the model, streaming K/V chunks to `sink`.

    The sink must accept `write_chunk(CacheChunk)` and serve back completed
    rows via `read_rows(layer, head, kind, start, count)`; both sinks in
    `cache` qualify. Returns the cache meta describing what was written.
    """
    if chunk_rows < 1:
        raise InputError("chunk_rows must be >= 1")
    if mode not in ("exact", "windowed"):
        raise InputError(f"unknown prefill mode {mode!r}")
    if mode == "windowed":
        if window is None or window < 1:
            raise InputError("windowed prefill needs window >= 1")
    else:
        window = None

    cfg = model.cfg
    toks = validate_tokens(cfg, tokens)
    T, H, d = toks.size, cfg.n_heads, cfg.head_dim
    if history_block is None:
        # Cap the float64 score block (H * C * B) near 64 MB.
        history_block = max(256, min(4096, (1 << 23) // max(1, H * min(chunk_rows, T))))
    scale = 1.0 / np.sqrt(d)

    for start in range(0, T, chunk_rows):
        end = min(start + chunk_rows, T)
        C = end - start
        positions = np.arange(start, end)
        h_res = model.embedding[toks[start:end]].copy()

        for l, lw in enumerate(model.layers):
            x = rmsnorm(h_res, lw.g_attn)
            q = _mm(x, lw.wq).reshape(C, H, d).transpose(1, 0, 2)
            k = _mm(x, lw.wk).reshape(C, H, d).transpose(1, 0, 2)
            v = _mm(x, lw.wv).reshape(C, H, d).transpose(1, 0, 2)
            if model.rotary_freqs is not None:
                q = rotary_apply(q, positions, model.rotary_freqs)
                k = rotary_apply(k, positions, model.rotary_freqs)
            for head in range(H):
                sink.write_chunk(CacheChunk(l, head, start, k[head], v[head]))

            attn = _OnlineAttention(H, C, d)
            q64 = q.astype(np.float64) * scale
            hist_lo = 0 if window is None else max(0, start - window)
            for blk in range(hist_lo, start, history_block):
                blk_end = min(blk + history_block, start)
                kb = np.stack(
                    [sink.read_rows(l, head, "keys", blk, blk_end - blk) for head in range(H)]
                )
                vb = np.stack(
                    [sink.read_rows(l, head, "values", blk, blk_end - blk) for head in range(H)]
                )
                scores = q64 @ kb.astype(np.float64).transpose(0, 2, 1)
                if window is not None:
                    j = np.arange(blk, blk_end)
                    scores = np.where(
                        j[None, None, :] >= positions[None, :, None] - window,
                        scores,
                        NEG_INF,
                    )
                attn.update(scores, vb)

            # Own-chunk block: causal mask, plus the window lower bound.
            scores = q64 @ k.astype(np.float64).transpose(0, 2, 1)
            rel = positions[:, None] - positions[None, :]
            allowed = rel >= 0
            if window is not None:
                allowed &= rel <= window
            scores = np.where(allowed[None, :, :], scores, NEG_INF)
            attn.update(scores, v)

            merged = attn.finish().transpose(1, 0, 2).reshape(C, H * d)
            h_res = h_res + _mm(merged, lw.wo)
            x2 = rmsnorm(h_res, lw.g_mlp)
            h_res = h_res + _mm(_silu(_mm(x2, lw.w_up)), lw.w_down)

    return model.cache_meta(T)
