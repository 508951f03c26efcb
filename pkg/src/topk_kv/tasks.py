"""Synthetic long-context tasks sized for desk-scale experiments.

An untrained model cannot answer natural-language questions, so retrieval
success has to be a property of the mechanism itself. The needle generator
exploits that with no positional encoding, first-layer keys depend only on
the token id: it scans a reserved tail of the vocabulary for tokens whose
first-layer self-score beats every other token's key score on at least one
head, with margin, verified over the entire vocabulary. Planting such a token
as the needle and probing with the same token makes "the needle row wins the
max inner product" a construction guarantee at any context length and depth,
not a hope about model behavior.

The multi-document generator gives each document a disjoint token range and
builds the copy probe from the target document's own tokens; the
query-key-correlated model then puts systematically more attention mass on
the target span, which is validated (and resampled) at construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .analysis import AttnRow, per_span_attention
from .errors import InputError
from .model import ModelConfig, RowCapture, TinyModel, forward_dense, rmsnorm
from .tensor import DTYPE, child_rng

RESERVED_TOKENS = 64
MIN_MARGIN = 1e-3
VALIDATION_CONTEXT = 2048


@dataclass(frozen=True)
class NeedleTask:
    """A haystack with one planted needle token and the probe that finds it."""

    haystack: np.ndarray  # token ids, length n_context
    needle_pos: int
    needle_token: int
    probe_prompt: tuple[int, ...]
    expected_answer: int
    certified_heads: tuple[int, ...]  # first-layer heads with verified dominance
    margin: float

    @property
    def n_context(self) -> int:
        return int(self.haystack.size)


@dataclass(frozen=True)
class MultiDocTask:
    tokens: np.ndarray
    spans: tuple[tuple[int, int], ...]
    target_doc: int
    probe_prompt: tuple[int, ...]


def _first_layer_qk(model: TinyModel) -> tuple[np.ndarray, np.ndarray]:
    """Per-token first-layer queries and keys, shape (vocab, H, d) each."""
    cfg = model.cfg
    lw = model.layers[0]
    x = rmsnorm(model.embedding, lw.g_attn).astype(np.float64)
    q = (x @ lw.wq.astype(np.float64)).reshape(cfg.vocab, cfg.n_heads, cfg.head_dim)
    k = (x @ lw.wk.astype(np.float64)).reshape(cfg.vocab, cfg.n_heads, cfg.head_dim)
    return q, k


def certify_needle_tokens(model: TinyModel) -> list[tuple[int, tuple[int, ...], float]]:
    """Rank reserved tokens by how decisively their key wins their own query.

    Returns (token, certified heads, worst certified margin), best first. A
    head certifies a token when dot(q_token, k_token) exceeds dot(q_token,
    k_other) for every other vocabulary token by at least MIN_MARGIN; this
    only holds position-independently without rotary encoding.
    """
    cfg = model.cfg
    if cfg.positional != "none":
        raise InputError(
            "needle certification needs positional='none'; rotary keys are "
            "position-dependent and void the any-depth guarantee"
        )
    if cfg.vocab <= RESERVED_TOKENS:
        raise InputError("vocab too small to reserve needle tokens")
    q, k = _first_layer_qk(model)
    ranked = []
    for tok in range(cfg.vocab - RESERVED_TOKENS, cfg.vocab):
        heads, worst = [], np.inf
        for h in range(cfg.n_heads):
            scores = k[:, h, :] @ q[tok, h]
            self_score = scores[tok]
            others = np.delete(scores, tok)
            margin = float(self_score - others.max())
            if margin >= MIN_MARGIN:
                heads.append(h)
                worst = min(worst, margin)
        if heads:
            ranked.append((tok, tuple(heads), worst))
    ranked.sort(key=lambda r: (-len(r[1]), -r[2], r[0]))
    return ranked


def _filler_tokens(cfg: ModelConfig, rng, n: int) -> np.ndarray:
    return rng.integers(0, cfg.vocab - RESERVED_TOKENS, size=n, dtype=np.int64)


def needle_position(depth_fraction: float, n_context: int) -> int:
    return int(round(depth_fraction * (n_context - 1)))


def _validate_needle(model: TinyModel, task: NeedleTask) -> bool:
    """Dense-attention oracle on a truncated instance.

    The truncated haystack (same seed-free construction: proportional needle
    position) must put the first-layer attention argmax of every certified
    head on the needle row, and dense greedy decode must emit the recorded
    answer.
    """
    n_val = min(task.n_context, VALIDATION_CONTEXT)
    if task.n_context <= VALIDATION_CONTEXT:
        hay = task.haystack
        pos = task.needle_pos
    else:
        frac = task.needle_pos / (task.n_context - 1)
        pos = needle_position(frac, n_val)
        hay = task.haystack[:n_val].copy()
        hay[pos] = task.needle_token
    seq = np.concatenate([hay, np.asarray(task.probe_prompt)])
    probe_at = len(seq) - 1
    capture = RowCapture([probe_at])
    logits, _ = forward_dense(model, seq, capture=capture)
    for row in capture.rows:
        if row.layer != 0 or row.head not in task.certified_heads:
            continue
        context_probs = row.probs[: len(hay)]
        if int(np.argmax(context_probs)) != pos:
            return False
    return int(np.argmax(logits[-1])) == task.expected_answer


def make_needle_task(
    model: TinyModel,
    n_context: int,
    depth_fraction: float,
    seed: int,
    needle_rank: int = 0,
    max_attempts: int = 8,
) -> NeedleTask:
    """Build a self-validating needle task of length n_context.

    The needle token is the needle_rank-th best certified token (grids plant
    several needles in one haystack by using distinct ranks). Instances that
    fail the dense-oracle validation are regenerated from derived seeds.
    """
    if n_context < 16:
        raise InputError("n_context must be >= 16")
    if not 0.0 <= depth_fraction <= 1.0:
        raise InputError("depth_fraction must be in [0, 1]")
    ranked = certify_needle_tokens(model)
    if needle_rank >= len(ranked):
        raise InputError(
            f"only {len(ranked)} certified needle tokens exist, rank {needle_rank} asked"
        )
    token, heads, margin = ranked[needle_rank]
    pos = needle_position(depth_fraction, n_context)

    for attempt in range(max_attempts):
        rng = child_rng(seed, 0x5EED, attempt)
        hay = _filler_tokens(model.cfg, rng, n_context)
        hay[pos] = token
        n_val = min(n_context, VALIDATION_CONTEXT)
        val_hay = hay[:n_val].copy()
        val_hay[needle_position(depth_fraction, n_val)] = token
        val_seq = np.concatenate([val_hay, [token]])
        val_logits, _ = forward_dense(model, val_seq)
        task = NeedleTask(
            haystack=hay,
            needle_pos=pos,
            needle_token=token,
            probe_prompt=(token,),
            expected_answer=int(np.argmax(val_logits[-1])),
            certified_heads=heads,
            margin=margin,
        )
        if _validate_needle(model, task):
            return task
    raise InputError(f"needle task failed validation {max_attempts} times")


def make_needle_grid(
    model: TinyModel, n_context: int, depths, seed: int
) -> list[NeedleTask]:
    """Plant one needle per depth in a single shared haystack.

    Each depth gets its own certified token, so the expensive prefill and
    index build over the haystack are paid once per context length and every
    depth cell is probed against the same artifacts (the prefill-once,
    query-many usage the decode loop is designed for). Tasks come back in
    depth order and share the haystack array.
    """
    depth_list = [float(f) for f in depths]
    positions = [needle_position(f, n_context) for f in depth_list]
    if len(set(positions)) != len(positions):
        raise InputError("depths collide at this context length")
    ranked = certify_needle_tokens(model)
    if len(ranked) < len(depth_list):
        raise InputError(
            f"grid needs {len(depth_list)} certified tokens, model offers {len(ranked)}"
        )
    rng = child_rng(seed, 0x5EED, 0)
    hay = _filler_tokens(model.cfg, rng, n_context)
    for rank, pos in enumerate(positions):
        hay[pos] = ranked[rank][0]
    n_val = min(n_context, VALIDATION_CONTEXT)
    tasks = []
    for rank, (frac, pos) in enumerate(zip(depth_list, positions)):
        token, heads, margin = ranked[rank]
        val_hay = hay[:n_val].copy()
        val_hay[needle_position(frac, n_val)] = token
        val_logits, _ = forward_dense(model, np.concatenate([val_hay, [token]]))
        tasks.append(
            NeedleTask(
                haystack=hay,
                needle_pos=pos,
                needle_token=token,
                probe_prompt=(token,),
                expected_answer=int(np.argmax(val_logits[-1])),
                certified_heads=heads,
                margin=margin,
            )
        )
    for task in tasks:
        if not _validate_needle(model, task):
            raise InputError(
                f"grid needle at depth {task.needle_pos / max(1, n_context - 1):.2f} "
                "failed the dense-oracle validation"
            )
    return tasks


def make_multidoc_task(
    model: TinyModel,
    n_docs: int,
    doc_len: int,
    target_doc: int,
    seed: int,
    probe_len: int = 16,
    max_attempts: int = 16,
) -> MultiDocTask:
    """Concatenated synthetic documents with a copy probe for one of them.

    Documents draw from disjoint token ranges; the probe repeats tokens from
    the target document. Instances are kept only if the dense model's mean
    attention over the target span strictly tops every other span (a fixture
    quality gate, not a model claim).
    """
    cfg = model.cfg
    if not 0 <= target_doc < n_docs:
        raise InputError("target_doc out of range")
    usable = cfg.vocab - RESERVED_TOKENS
    slice_width = usable // n_docs
    if slice_width < 2:
        raise InputError(f"vocab too small for {n_docs} disjoint documents")
    spans = tuple((i * doc_len, (i + 1) * doc_len) for i in range(n_docs))
    n_ctx = n_docs * doc_len

    for attempt in range(max_attempts):
        rng = child_rng(seed, 0xD0C, attempt)
        docs = [
            rng.integers(i * slice_width, (i + 1) * slice_width, size=doc_len, dtype=np.int64)
            for i in range(n_docs)
        ]
        tokens = np.concatenate(docs)
        probe = tuple(int(t) for t in rng.choice(docs[target_doc], size=min(probe_len, doc_len)))
        task = MultiDocTask(tokens, spans, target_doc, probe)
        if n_docs == 1 or _validate_multidoc(model, task):
            return task
    raise InputError(f"multidoc task failed the salience gate {max_attempts} times")


def multidoc_context_rows(model: TinyModel, task: MultiDocTask) -> list[AttnRow]:
    """Dense attention of each probe position over the document region only."""
    seq = np.concatenate([task.tokens, np.asarray(task.probe_prompt)])
    n_ctx = task.tokens.size
    probe_positions = range(n_ctx, len(seq))
    capture = RowCapture(probe_positions)
    forward_dense(model, seq, capture=capture)
    rows = []
    for row in capture.rows:
        ctx = row.probs[:n_ctx].astype(np.float64)
        rows.append(AttnRow((ctx / ctx.sum()).astype(DTYPE), row.layer, row.head, row.token_pos))
    return rows


def _validate_multidoc(model: TinyModel, task: MultiDocTask) -> bool:
    means = per_span_attention(multidoc_context_rows(model, task), task.spans)
    target = means[task.target_doc]
    return bool(all(target > m for i, m in enumerate(means) if i != task.target_doc))
