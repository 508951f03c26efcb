"""Benchmark harness: needle grids, scaling sweeps, machine-readable reports.

Counters (distance evaluations, bytes moved) are the asserted metrics; wall
time and peak resident size are reported but never asserted, so results are
stable in CI. Reports are emitted as schema-versioned JSON or fixed-header
CSV; with timings stripped, identical run configurations produce
byte-identical files.
"""

from __future__ import annotations

import csv
import gc
import json
import os
import resource
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .ann import GraphParams, IndexSet, build_index, build_index_set, knn_search
from .attention import GenWindow, TierAccounting, ValueTier, generate, window_decode_step
from .budget import LayerBudget, uniform_budget
from .cache import CacheFile, CacheFileWriter, CacheMeta, KvCache
from .errors import InputError
from .model import ModelConfig, TinyModel, build_model
from .prefill import prefill_chunked
from .tasks import make_needle_grid
from .tensor import DTYPE, child_rng

REPORT_SCHEMA = "topk-kv-bench-v1"
CSV_HEADER = ["scenario", "N", "depth", "k", "success", "bytes_per_step", "dist_per_query", "wall_ms"]

DESK_CONFIG = ModelConfig()  # vocab=512, L=4, H=4, d=16
EXACT_PREFILL_LIMIT = 4096  # above this, grids prefill in windowed mode
BENCH_PREFILL_WINDOW = 128
BENCH_PREFILL_CHUNK = 512
BENCH_GRAPH_EF_CONSTRUCTION = 64  # build beam for bench-scale corpora


def peak_resident_bytes() -> int:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


@dataclass(frozen=True)
class BenchResult:
    scenario: str
    n_context: int
    depth: float | None
    k: int | None
    success: float
    bytes_per_step: float
    dist_per_query: float
    wall_ms: float
    peak_resident: int = 0


@dataclass(frozen=True)
class RunConfig:
    """One decode run over persisted artifacts."""

    cache_path: str
    index_path: str
    budget_spec: str
    sampler: str = "greedy"
    n_max: int = 1
    seed: int = 0
    accounting_path: str | None = None
    tokens_out_path: str | None = None


def emit_report(results, path, fmt: str = "json", include_timings: bool = True) -> None:
    """Write results in stable field order; refuses to emit an empty report."""
    rows = list(results)
    if not rows:
        raise InputError("no results to report")
    if fmt not in ("json", "csv"):
        raise InputError(f"unknown report format {fmt!r}")

    def strip(r: BenchResult) -> BenchResult:
        if include_timings:
            return r
        return BenchResult(
            r.scenario, r.n_context, r.depth, r.k, r.success,
            r.bytes_per_step, r.dist_per_query, 0.0, 0,
        )

    rows = [strip(r) for r in rows]
    if fmt == "json":
        payload = {"schema": REPORT_SCHEMA, "results": [asdict(r) for r in rows]}
        with open(path, "w") as f:
            json.dump(payload, f, indent=2)
            f.write("\n")
        return
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for r in rows:
            writer.writerow(
                [
                    r.scenario,
                    r.n_context,
                    "" if r.depth is None else r.depth,
                    "" if r.k is None else r.k,
                    r.success,
                    r.bytes_per_step,
                    r.dist_per_query,
                    r.wall_ms,
                ]
            )


def load_report(path) -> list[BenchResult]:
    with open(path) as f:
        payload = json.load(f)
    if payload.get("schema") != REPORT_SCHEMA:
        raise InputError(f"unexpected report schema {payload.get('schema')!r}")
    return [BenchResult(**row) for row in payload["results"]]


# ---------------------------------------------------------------------------
# Needle-in-a-haystack grid
# ---------------------------------------------------------------------------


def prefill_to_file(model: TinyModel, tokens, path, mode=None, window=BENCH_PREFILL_WINDOW,
                    chunk_rows=BENCH_PREFILL_CHUNK) -> CacheMeta:
    """Prefill a prompt into a cache file, picking the mode by scale."""
    n = len(tokens)
    if mode is None:
        mode = "exact" if n <= EXACT_PREFILL_LIMIT else "windowed"
    meta = model.cache_meta(n)
    with CacheFileWriter(meta, path) as sink:
        prefill_chunked(
            model, tokens, min(chunk_rows, n), sink,
            mode=mode, window=window if mode == "windowed" else None,
        )
    return meta


def _needle_success(task, retrievals) -> bool:
    """True when every certified first-layer head retrieved the needle row."""
    for head in task.certified_heads:
        ids = retrievals.get((0, head))
        if ids is None or task.needle_pos not in ids:
            return False
    return True


def run_niah_grid(
    lengths,
    depths,
    k_values,
    seed: int = 0,
    kinds=("flat", "graph"),
    workdir: str = ".",
    cfg: ModelConfig | None = None,
    window_fraction: float = 0.1,
    graph_ef_construction: int = BENCH_GRAPH_EF_CONSTRUCTION,
    ef_search: int | None = None,
    keep_artifacts: bool = False,
    workers: int = 2,
) -> list[BenchResult]:
    """Needle retrieval success over (length, depth, k) cells.

    Per length: one multi-needle haystack is prefilled and indexed once, then
    each (depth, k) cell force-decodes that depth's probe token and checks the
    retrieval trace. A sliding-window reference decode (window =
    window_fraction * N, no retrieval) runs the same cells for comparison.
    """
    if not (list(lengths) and list(depths) and list(k_values)):
        raise InputError("lengths, depths and k_values must be nonempty")
    base_cfg = cfg or DESK_CONFIG
    model_cfg = ModelConfig(
        vocab=base_cfg.vocab, n_layers=base_cfg.n_layers, n_heads=base_cfg.n_heads,
        head_dim=base_cfg.head_dim, ff_mult=base_cfg.ff_mult, seed=seed,
        positional="none",
    )
    model = build_model(model_cfg)
    results: list[BenchResult] = []

    for n in sorted(lengths):
        tasks = make_needle_grid(model, n, depths, seed)
        cache_path = os.path.join(workdir, f"niah-N{n}.tkkv")
        prefill_to_file(model, tasks[0].haystack, cache_path)

        with CacheFile(cache_path) as cache:
            tier = ValueTier(cache)
            for kind in kinds:
                params = GraphParams(ef_construction=graph_ef_construction, seed=seed)
                t0 = time.perf_counter()
                indices = build_index_set(cache, kind, params, workers=workers)
                build_ms = (time.perf_counter() - t0) * 1000.0
                for k in k_values:
                    for task, depth in zip(tasks, depths):
                        results.append(
                            _run_needle_cell(
                                model, tier, indices, task, float(depth), int(k),
                                kind, n, ef_search, build_ms,
                            )
                        )
                del indices
                gc.collect()

            window = max(1, int(round(window_fraction * n)))
            for task, depth in zip(tasks, depths):
                results.append(_run_window_cell(model, tier, task, float(depth), window, n))

        if not keep_artifacts:
            os.unlink(cache_path)
    results.sort(key=lambda r: (r.n_context, r.scenario, r.depth or 0.0, r.k or 0))
    return results


def _run_needle_cell(model, tier, indices: IndexSet, task, depth, k, kind, n,
                     ef_search, build_ms) -> BenchResult:
    retrievals = {}

    def hook(step, layer, head, ids):
        if step == 0:
            retrievals[(layer, head)] = ids

    budget = uniform_budget(model.cfg.n_layers, k * model.cfg.n_layers)
    indices.reset_counters()
    t0 = time.perf_counter()
    _, steps = generate(
        model, tier, indices, budget, n_max=1,
        seed_tokens=task.probe_prompt, ef_search=ef_search, retrieval_hook=hook,
    )
    wall_ms = (time.perf_counter() - t0) * 1000.0 + build_ms
    evals, queries = indices.counter_totals()
    return BenchResult(
        scenario=f"niah-{kind}",
        n_context=n,
        depth=depth,
        k=k,
        success=1.0 if _needle_success(task, retrievals) else 0.0,
        bytes_per_step=float(np.mean([s["bytes_moved"] for s in steps])),
        dist_per_query=evals / max(1, queries),
        wall_ms=wall_ms,
        peak_resident=peak_resident_bytes(),
    )


def _run_window_cell(model, tier, task, depth, window, n) -> BenchResult:
    attended = {}

    def hook(layer, head, ids):
        attended.setdefault((layer, head), ids)

    win = GenWindow(model.cfg.n_layers, model.cfg.n_heads, model.cfg.head_dim, 4)
    acct = TierAccounting()
    t0 = time.perf_counter()
    window_decode_step(
        model, task.probe_prompt[0], tier, win, window,
        accounting=acct, attended_hook=hook,
    )
    wall_ms = (time.perf_counter() - t0) * 1000.0
    success = all(
        task.needle_pos in attended[(0, h)] for h in task.certified_heads
    )
    return BenchResult(
        scenario="niah-window",
        n_context=n,
        depth=depth,
        k=window,
        success=1.0 if success else 0.0,
        bytes_per_step=float(acct.bytes_moved),
        dist_per_query=0.0,
        wall_ms=wall_ms,
        peak_resident=peak_resident_bytes(),
    )


# ---------------------------------------------------------------------------
# Scaling sweep
# ---------------------------------------------------------------------------


def run_scaling_bench(
    lengths,
    k: int = 8,
    seed: int = 0,
    dim: int = 16,
    n_queries: int = 20,
    cfg: ModelConfig | None = None,
    graph_ef_construction: int = BENCH_GRAPH_EF_CONSTRUCTION,
    ef_search: int | None = None,
) -> list[BenchResult]:
    """Distance-evaluation and byte-movement scaling across corpus sizes.

    Per length N: a Gaussian corpus measures per-query distance counts for the
    flat scan (always exactly N) and the graph search (sublinear growth), and
    a synthetic random cache of N rows is decoded for three steps to record
    the per-step cold bytes, which depend on the budget alone, never on N.
    """
    lengths = sorted(lengths)
    if not lengths:
        raise InputError("lengths must be nonempty")
    model_cfg = cfg or DESK_CONFIG
    model = build_model(model_cfg)
    results = []
    for n in lengths:
        corpus_rng = child_rng(seed, 0x5CA1E, n)
        corpus = corpus_rng.standard_normal((n, dim), dtype=np.float64).astype(DTYPE)
        queries = corpus_rng.standard_normal((n_queries, dim), dtype=np.float64).astype(DTYPE)

        for kind in ("flat", "graph"):
            params = GraphParams(ef_construction=graph_ef_construction, seed=seed)
            t0 = time.perf_counter()
            idx = build_index(corpus, kind, params if kind == "graph" else None)
            build_ms = (time.perf_counter() - t0) * 1000.0
            for q in queries:
                knn_search(idx, q, k, ef_search)
            bytes_per_step = _synthetic_decode_bytes(model, n, k, seed) if kind == "flat" else 0.0
            results.append(
                BenchResult(
                    scenario=f"scaling-{kind}",
                    n_context=n,
                    depth=None,
                    k=k,
                    success=1.0,
                    bytes_per_step=bytes_per_step,
                    dist_per_query=idx.distance_evals / max(1, idx.queries),
                    wall_ms=build_ms,
                    peak_resident=peak_resident_bytes(),
                )
            )
            del idx
            gc.collect()
    return results


def synthetic_cache(cfg: ModelConfig, n_tokens: int, seed: int) -> KvCache:
    """Random-filled cache with a real model's meta; decode-compatible."""
    rng = child_rng(seed, 0xCAC4E, n_tokens)
    meta = CacheMeta(cfg.n_layers, cfg.n_heads, n_tokens, cfg.head_dim, "f32", cfg.model_id)
    shape = (cfg.n_layers, cfg.n_heads, n_tokens, cfg.head_dim)
    keys = rng.standard_normal(shape, dtype=np.float32)
    values = rng.standard_normal(shape, dtype=np.float32)
    return KvCache(meta, keys, values)


def _synthetic_decode_bytes(model: TinyModel, n: int, k: int, seed: int) -> float:
    cache = synthetic_cache(model.cfg, n, seed)
    indices = build_index_set(cache, "flat")
    budget = uniform_budget(model.cfg.n_layers, k * model.cfg.n_layers)
    _, steps = generate(
        model, ValueTier(cache), indices, budget, n_max=3, seed_tokens=[0],
    )
    return float(np.mean([s["bytes_moved"] for s in steps]))
