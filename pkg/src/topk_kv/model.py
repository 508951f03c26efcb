"""Seeded tiny transformer decoder used as the end-to-end test vehicle.

Multi-head causal attention, pre-norm residual blocks, SiLU MLP, optional
rotary position encoding. Weights are drawn deterministically from the config
seed, so a (config, seed) pair pins the model bit-for-bit.

Untrained models attend almost uniformly, which makes retrieval experiments
vacuous. To give attention usable structure without training, the key
projection is initialized correlated with the query projection
(W_K = rho * W_Q + sqrt(1 - rho^2) * noise). Token similarity then drives
attention: repeated or matching tokens draw systematically higher scores,
which is the property the synthetic retrieval tasks lean on.

All matmuls accumulate in float64 and round once to float32, so the batched
prefill path and the token-at-a-time decode path agree to float32 resolution.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .cache import CacheMeta, KvCache
from .errors import InputError
from .tensor import DTYPE, child_rng

QK_CORRELATION = 0.5
SCORE_SCALE_TARGET = 2.5  # stddev of raw cross-token scores after 1/sqrt(d)
ROTARY_BASE = 10000.0
RMS_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 512
    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 16
    ff_mult: int = 4
    seed: int = 0
    positional: str = "rotary"  # "rotary" | "none"

    def __post_init__(self):
        for name in ("vocab", "n_layers", "n_heads", "head_dim", "ff_mult"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be positive")
        if self.positional not in ("rotary", "none"):
            raise InputError(f"unknown positional mode {self.positional!r}")

    @property
    def model_dim(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def model_id(self) -> str:
        return (
            f"tiny-v1-s{self.seed}-L{self.n_layers}H{self.n_heads}"
            f"d{self.head_dim}V{self.vocab}F{self.ff_mult}-{self.positional}"
        )

    @classmethod
    def from_model_id(cls, model_id: str) -> "ModelConfig":
        """Reconstruct the config a cache was built with from its model_id."""
        m = re.fullmatch(
            r"tiny-v1-s(-?\d+)-L(\d+)H(\d+)d(\d+)V(\d+)F(\d+)-(rotary|none)", model_id
        )
        if not m:
            raise InputError(f"unparseable model_id {model_id!r}")
        seed, L, H, d, vocab, ff = (int(g) for g in m.groups()[:6])
        return cls(
            vocab=vocab, n_layers=L, n_heads=H, head_dim=d, ff_mult=ff,
            seed=seed, positional=m.group(7),
        )


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    g_attn: np.ndarray
    g_mlp: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass
class TinyModel:
    cfg: ModelConfig
    embedding: np.ndarray
    layers: list[LayerWeights]
    g_final: np.ndarray
    unembed: np.ndarray
    rotary_freqs: np.ndarray | None = field(default=None)

    @property
    def model_id(self) -> str:
        return self.cfg.model_id

    def cache_meta(self, n_tokens: int) -> CacheMeta:
        return CacheMeta(
            self.cfg.n_layers,
            self.cfg.n_heads,
            n_tokens,
            self.cfg.head_dim,
            "f32",
            self.model_id,
        )


def build_model(cfg: ModelConfig) -> TinyModel:
    """Draw all weights from the config seed.

    Scales: embeddings and unembedding 0.02; residual-writing projections
    (W_O, MLP down) 0.02/sqrt(L); W_Q/W_K sized so cross-token attention
    scores have stddev near SCORE_SCALE_TARGET; W_K correlated with W_Q by
    QK_CORRELATION.
    """
    D = cfg.model_dim
    sigma_qk = float(np.sqrt(SCORE_SCALE_TARGET / D))
    sigma_res = 0.02 / np.sqrt(cfg.n_layers)

    def draw(tag: int, shape, scale: float) -> np.ndarray:
        g = child_rng(cfg.seed, tag)
        return (g.standard_normal(shape, dtype=np.float64) * scale).astype(DTYPE)

    embedding = draw(0, (cfg.vocab, D), 0.02)
    unembed = draw(1, (D, cfg.vocab), 0.02)
    layers = []
    for l in range(cfg.n_layers):
        base = 16 * (l + 1)
        wq = draw(base + 0, (D, D), sigma_qk)
        wk_noise = draw(base + 1, (D, D), sigma_qk)
        rho = QK_CORRELATION
        wk = (rho * wq + np.sqrt(1.0 - rho * rho) * wk_noise).astype(DTYPE)
        layers.append(
            LayerWeights(
                wq=wq,
                wk=wk,
                wv=draw(base + 2, (D, D), 1.0 / np.sqrt(D)),
                wo=draw(base + 3, (D, D), sigma_res),
                g_attn=np.ones(D, dtype=DTYPE),
                g_mlp=np.ones(D, dtype=DTYPE),
                w_up=draw(base + 4, (D, cfg.ff_mult * D), 1.0 / np.sqrt(D)),
                w_down=draw(base + 5, (cfg.ff_mult * D, D), sigma_res),
            )
        )
    freqs = None
    if cfg.positional == "rotary":
        half = cfg.head_dim // 2
        freqs = ROTARY_BASE ** (-np.arange(half, dtype=np.float64) * 2.0 / cfg.head_dim)
    return TinyModel(cfg, embedding, layers, np.ones(D, dtype=DTYPE), unembed, freqs)


# ---------------------------------------------------------------------------
# Kernels (float64 accumulation, float32 results)
# ---------------------------------------------------------------------------


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(DTYPE)


def rmsnorm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    scale = np.sqrt((x64 * x64).mean(axis=-1, keepdims=True) + RMS_EPS)
    return ((x64 / scale) * gain.astype(np.float64)).astype(DTYPE)


def _silu(x: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    return (x64 / (1.0 + np.exp(-x64))).astype(DTYPE)


def rotary_apply(x: np.ndarray, positions: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    """Rotate per-head vectors by position-dependent angles.

    x has shape (..., T, d) with consecutive pairs forming rotation planes;
    positions has shape (T,).
    """
    angles = positions[:, None].astype(np.float64) * freqs[None, :]  # (T, d/2)
    cos, sin = np.cos(angles), np.sin(angles)
    x64 = x.astype(np.float64)
    even, odd = x64[..., 0::2], x64[..., 1::2]
    out = np.empty_like(x64)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out.astype(DTYPE)


def _softmax_rows_f64(scores: np.ndarray) -> np.ndarray:
    """Row softmax along the last axis, computed and returned in float64."""
    s = scores.astype(np.float64)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


class RowCapture:
    """Collects softmaxed attention rows at requested query positions."""

    def __init__(self, positions):
        self.positions = sorted(set(int(p) for p in positions))
        self.rows = []  # filled with analysis.AttnRow

    def grab(self, layer: int, probs_f64: np.ndarray):
        from .analysis import AttnRow

        for p in self.positions:
            for h in range(probs_f64.shape[0]):
                row = probs_f64[h, p, : p + 1]
                self.rows.append(AttnRow((row / row.sum()).astype(DTYPE), layer, h, p))


def validate_tokens(cfg: ModelConfig, tokens) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.int64)
    if t.ndim != 1 or t.size == 0:
        raise InputError("tokens must be a nonempty 1-d sequence")
    if t.min() < 0 or t.max() >= cfg.vocab:
        raise InputError(f"token id out of vocab range [0, {cfg.vocab})")
    return t


def forward_dense(
    model: TinyModel, tokens, capture: RowCapture | None = None
) -> tuple[np.ndarray, KvCache]:
    """Reference full-attention forward pass.

    Returns per-position next-token logits (T, vocab) and the KV cache holding
    every layer/head's post-rotary keys and values.
    """
    cfg = model.cfg
    t = validate_tokens(cfg, tokens)
    T, H, d = t.size, cfg.n_heads, cfg.head_dim
    positions = np.arange(T)

    h_res = model.embedding[t].copy()
    keys = np.empty((cfg.n_layers, H, T, d), dtype=DTYPE)
    values = np.empty((cfg.n_layers, H, T, d), dtype=DTYPE)
    mask = np.triu(np.full((T, T), -np.inf), k=1)  # causal: no peeking forward

    for l, lw in enumerate(model.layers):
        x = rmsnorm(h_res, lw.g_attn)
        q = _mm(x, lw.wq).reshape(T, H, d).transpose(1, 0, 2)
        k = _mm(x, lw.wk).reshape(T, H, d).transpose(1, 0, 2)
        v = _mm(x, lw.wv).reshape(T, H, d).transpose(1, 0, 2)
        if model.rotary_freqs is not None:
            q = rotary_apply(q, positions, model.rotary_freqs)
            k = rotary_apply(k, positions, model.rotary_freqs)
        keys[l], values[l] = k, v

        scores = (q.astype(np.float64) @ k.astype(np.float64).transpose(0, 2, 1)) / np.sqrt(d)
        probs = _softmax_rows_f64(scores + mask)
        if capture is not None:
            capture.grab(l, probs)
        attn = (probs @ v.astype(np.float64)).astype(DTYPE)  # (H, T, d)
        merged = attn.transpose(1, 0, 2).reshape(T, H * d)
        h_res = h_res + _mm(merged, lw.wo)
        x2 = rmsnorm(h_res, lw.g_mlp)
        h_res = h_res + _mm(_silu(_mm(x2, lw.w_up)), lw.w_down)

    logits = _mm(rmsnorm(h_res, model.g_final), model.unembed)
    cache = KvCache(model.cache_meta(T), keys, values)
    return logits, cache


def sample_token(logits: np.ndarray, sampler: str, rng, temperature: float = 1.0) -> int:
    """greedy: argmax with lowest-id tie break; categorical: seeded draw."""
    if sampler == "greedy":
        return int(np.argmax(logits))
    if sampler == "categorical":
        from .tensor import softmax

        p = softmax(logits.astype(np.float64) / temperature).astype(np.float64)
        return int(rng.choice(len(p), p=p / p.sum()))
    raise InputError(f"unknown sampler {sampler!r}")


def dense_generate(
    model: TinyModel,
    prompt,
    n_max: int,
    sampler: str = "greedy",
    temperature: float = 1.0,
    sample_seed: int = 0,
    capture_steps: int = 0,
) -> tuple[list[int], list]:
    """Reference autoregressive decoding by full-forward recompute.

    Quadratic per step; intended for oracle checks at desk scale. Captured
    rows (if requested) are the new token's attention over the whole prefix
    for the first `capture_steps` steps.
    """
    tokens = list(validate_tokens(model.cfg, prompt))
    rng = child_rng(sample_seed, 0xD5)
    rows = []
    for step in range(n_max):
        capture = RowCapture([len(tokens) - 1]) if step < capture_steps else None
        logits, _ = forward_dense(model, tokens, capture=capture)
        if capture is not None:
            rows.extend(capture.rows)
        tokens.append(sample_token(logits[-1], sampler, rng, temperature))
    return tokens[-n_max:], rows
