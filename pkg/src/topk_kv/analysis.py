"""Attention-sparsity diagnostics.

Operates on softmaxed attention rows captured elsewhere: Shannon entropy per
row, how many top scores cover a probability mass target, per-span score
aggregation for multi-document prompts, and the k-required / entropy
correlation pipeline. Pure aggregation; nothing here runs a model.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateError, FormatError, InputError

ROW_MAGIC = b"TKAR"
ROW_VERSION = 1
NORMALIZATION_TOL = 1e-6


@dataclass(frozen=True)
class AttnRow:
    """One softmaxed attention row with its provenance."""

    probs: np.ndarray
    layer: int
    head: int
    token_pos: int

    def __post_init__(self):
        p = np.ascontiguousarray(self.probs, dtype=np.float32)
        object.__setattr__(self, "probs", p)
        if p.ndim != 1:
            raise InputError("attention row must be 1-d")
        if (p < 0).any():
            raise InputError("attention row has negative entries")
        if abs(float(p.sum(dtype=np.float64)) - 1.0) > NORMALIZATION_TOL:
            raise InputError(f"attention row sums to {p.sum(dtype=np.float64)}")


@dataclass(frozen=True)
class EntropyReport:
    """Mean per-(layer, head) row entropy in nats, plus the uniform bound."""

    mean_entropy: np.ndarray  # (n_layers, n_heads)
    sample_count: np.ndarray  # (n_layers, n_heads)
    max_entropy: float  # ln(n_keys)

    def layer_means(self) -> np.ndarray:
        return self.mean_entropy.mean(axis=1)


def attn_entropy(row: AttnRow) -> float:
    """Shannon entropy -sum(a * ln a) of one row, with 0*ln(0) = 0."""
    p = row.probs.astype(np.float64)
    nz = p[p > 0.0]
    return float(-(nz * np.log(nz)).sum())


def mass_coverage(row: AttnRow, p: float) -> int:
    """Smallest number of top scores whose sum reaches probability mass p."""
    if not 0.0 < p <= 1.0:
        raise InputError(f"mass fraction must be in (0, 1], got {p}")
    desc = np.sort(row.probs.astype(np.float64))[::-1]
    cum = np.cumsum(desc)
    # A float32 row can sum to slightly under p; never ask for more mass
    # than the row holds (this also makes p=1.0 count the nonzero entries).
    target = min(p, cum[-1])
    return int(np.searchsorted(cum, target, side="left")) + 1


def per_span_attention(
    rows: Sequence[AttnRow], spans: Sequence[tuple[int, int]]
) -> np.ndarray:
    """Mean attention per token inside each span, averaged over all rows.

    Spans are half-open (start, end) and must partition [0, N) for the rows'
    common length N.
    """
    if not rows:
        raise InputError("need at least one attention row")
    n = rows[0].probs.shape[0]
    ordered = sorted(spans)
    cursor = 0
    for start, end in ordered:
        if start != cursor or end <= start:
            raise InputError(f"spans must partition [0, {n}) without overlap")
        cursor = end
    if cursor != n:
        raise InputError(f"spans cover [0, {cursor}), rows have length {n}")

    acc = np.zeros(len(spans), dtype=np.float64)
    for row in rows:
        if row.probs.shape[0] != n:
            raise InputError("rows have differing lengths")
        p = row.probs.astype(np.float64)
        for i, (start, end) in enumerate(spans):
            acc[i] += p[start:end].mean()
    return acc / len(rows)


def k_required(
    performance_fn: Callable[[int], float],
    dense_score: float,
    target_fraction: float,
    k_grid: Sequence[int],
) -> int | None:
    """Smallest grid k scoring >= target_fraction * dense_score, else None."""
    if not k_grid:
        raise InputError("k_grid is empty")
    grid = list(k_grid)
    if grid != sorted(grid):
        raise InputError("k_grid must be ascending")
    if dense_score == 0:
        raise DegenerateError("dense baseline score is zero")
    threshold = target_fraction * dense_score
    for k in grid:
        if performance_fn(k) >= threshold:
            return k
    return None


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation coefficient."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1 or xa.size < 2:
        raise InputError("need two equal-length sequences of >= 2 values")
    xc = xa - xa.mean()
    yc = ya - ya.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0:
        raise DegenerateError("zero variance input")
    return float((xc * yc).sum() / denom)


def topk_truncate(probs: np.ndarray, k: int) -> np.ndarray:
    """Keep the k largest entries (ties to lower index) and renormalize.

    The before/after view of what top-k retrieval does to an attention row.
    """
    p = np.asarray(probs, dtype=np.float64)
    if k >= p.size:
        return (p / p.sum()).astype(np.float32)
    order = np.lexsort((np.arange(p.size), -p))[:k]
    out = np.zeros_like(p)
    out[order] = p[order]
    return (out / out.sum()).astype(np.float32)


def entropy_report(
    rows: Sequence[AttnRow],
    n_layers: int,
    n_heads: int,
    n_keys: int,
    aggregate: str = "mean-of-entropies",
) -> EntropyReport:
    """Aggregate row entropies per (layer, head).

    aggregate="mean-of-entropies" averages per-row entropies (default);
    "entropy-of-mean" takes the entropy of each cell's averaged row instead.
    """
    if aggregate not in ("mean-of-entropies", "entropy-of-mean"):
        raise InputError(f"unknown aggregate mode {aggregate!r}")
    sums = np.zeros((n_layers, n_heads), dtype=np.float64)
    counts = np.zeros((n_layers, n_heads), dtype=np.int64)
    mean_rows: dict[tuple[int, int], np.ndarray] = {}
    for row in rows:
        if not (0 <= row.layer < n_layers and 0 <= row.head < n_heads):
            raise InputError(f"row tagged ({row.layer}, {row.head}) out of range")
        if aggregate == "mean-of-entropies":
            sums[row.layer, row.head] += attn_entropy(row)
        else:
            cell = (row.layer, row.head)
            acc = mean_rows.setdefault(cell, np.zeros(row.probs.size, np.float64))
            acc += row.probs
        counts[row.layer, row.head] += 1
    if aggregate == "entropy-of-mean":
        for (layer, head), acc in mean_rows.items():
            mean = acc / counts[layer, head]
            sums[layer, head] = attn_entropy(AttnRow(mean / mean.sum(), layer, head, 0))
        mean = np.where(counts > 0, sums, 0.0)
    else:
        mean = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    return EntropyReport(mean, counts, float(np.log(n_keys)))


# ---------------------------------------------------------------------------
# Row capture file: TKAR magic, version, row count, then tagged f32 rows
# (each record carries its own length; rows from different generation steps
# have different widths).
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIQ")
_ROW_TAG = struct.Struct("<IIQQ")  # layer, head, token_pos, row_len


def write_rows(path, rows: Sequence[AttnRow]) -> None:
    if not rows:
        raise InputError("refusing to write an empty row file")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(ROW_MAGIC, ROW_VERSION, len(rows)))
        for row in rows:
            f.write(_ROW_TAG.pack(row.layer, row.head, row.token_pos, row.probs.size))
            f.write(row.probs.tobytes())


def read_rows(path) -> list[AttnRow]:
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise FormatError("row file truncated in header", offset=len(head))
        magic, version, n_rows = _HEADER.unpack(head)
        if magic != ROW_MAGIC:
            raise FormatError(f"bad magic {magic!r}", offset=0)
        if version != ROW_VERSION:
            raise FormatError(f"unsupported row file version {version}", offset=4)
        rows = []
        for _ in range(n_rows):
            at = f.tell()
            tag = f.read(_ROW_TAG.size)
            if len(tag) < _ROW_TAG.size:
                raise FormatError("row file truncated in record tag", offset=at + len(tag))
            layer, head_idx, pos, row_len = _ROW_TAG.unpack(tag)
            blob = f.read(4 * row_len)
            if len(blob) < 4 * row_len:
                raise FormatError("row file truncated in row data", offset=f.tell())
            rows.append(AttnRow(np.frombuffer(blob, dtype="<f4"), layer, head_idx, pos))
    return rows


def report_to_json(report: dict) -> str:
    """Serialize a report dict with stable key order and full float precision."""
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False)
