"""Command-line surface: prefill -> index -> decode plus analysis and benches.

Every command routes its randomness through --seed (or the model seed baked
into an artifact); rerunning a command line reproduces its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import analysis
from .ann import GraphParams, build_index_set, load_index_set, save_index_set
from .attention import ValueTier, generate
from .bench import emit_report, prefill_to_file, run_niah_grid, run_scaling_bench
from .budget import parse_budget_spec
from .cache import CacheFile
from .errors import InputError, TopkKvError
from .model import ModelConfig, build_model, dense_generate
from .prefill import prefill_chunked
from .tasks import make_needle_task
from .tensor import child_rng

logger = logging.getLogger("topk_kv")


def read_tokens(path, fmt: str = "text") -> np.ndarray:
    if fmt == "text":
        with open(path) as f:
            return np.array([int(line) for line in f if line.strip()], dtype=np.int64)
    if fmt == "u32":
        return np.fromfile(path, dtype="<u4").astype(np.int64)
    raise InputError(f"unknown token format {fmt!r}")


def write_tokens(path, tokens, fmt: str = "text") -> None:
    if fmt == "text":
        with open(path, "w") as f:
            f.writelines(f"{int(t)}\n" for t in tokens)
    elif fmt == "u32":
        np.asarray(tokens, dtype="<u4").tofile(path)
    else:
        raise InputError(f"unknown token format {fmt!r}")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model-seed", type=int, default=0)
    p.add_argument("--vocab", type=int, default=512)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--head-dim", type=int, default=16)
    p.add_argument("--ff-mult", type=int, default=4)
    p.add_argument("--positional", choices=["rotary", "none"], default="rotary")


def _model_from_args(args) -> ModelConfig:
    return ModelConfig(
        vocab=args.vocab, n_layers=args.layers, n_heads=args.heads,
        head_dim=args.head_dim, ff_mult=args.ff_mult,
        seed=args.model_seed, positional=args.positional,
    )


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="topk-kv", description=__doc__)
    p.add_argument("--seed", type=int, default=0, help="base seed for all randomness")
    p.add_argument("--threads", type=int, default=1, help="worker threads (numba)")
    p.add_argument("--log-level", default="warning")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prefill", help="run a prompt through the model into a cache file")
    _add_model_flags(sp)
    sp.add_argument("--tokens", required=True)
    sp.add_argument("--token-format", choices=["text", "u32"], default="text")
    sp.add_argument("--chunk-rows", type=int, default=512)
    sp.add_argument("--prefill-mode", default="exact", help="exact or windowed:W")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("index", help="build per-(layer,head) search indexes over a cache")
    sp.add_argument("--cache", required=True)
    sp.add_argument("--kind", choices=["flat", "graph"], default="flat")
    sp.add_argument("--m", type=int, default=16, help="graph max degree")
    sp.add_argument("--ef-construction", type=int, default=200)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("decode", help="top-k attention decoding over cache + index")
    sp.add_argument("--cache", required=True)
    sp.add_argument("--index", required=True)
    sp.add_argument("--budget", required=True,
                    help="uniform:K | linear:B | entropy:B:FILE | explicit:[k1,...]")
    sp.add_argument("--n-max", type=int, default=16)
    sp.add_argument("--sampler", choices=["greedy", "categorical"], default="greedy")
    sp.add_argument("--temperature", type=float, default=1.0)
    sp.add_argument("--start-tokens", help="token file force-fed before sampling")
    sp.add_argument("--start-token", type=int, help="single seed token id")
    sp.add_argument("--token-format", choices=["text", "u32"], default="text")
    sp.add_argument("--combine", choices=["joint", "additive"], default="joint")
    sp.add_argument("--ef-search", type=int)
    sp.add_argument("--pinned-prefix", type=int, default=0)
    sp.add_argument("--accounting", help="JSONL per-step accounting stream")
    sp.add_argument("--out", help="file for the sampled tokens")

    sp = sub.add_parser("task", help="emit a synthetic task")
    sp.add_argument("task_kind", choices=["needle"])
    _add_model_flags(sp)
    sp.set_defaults(positional="none")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--depth", type=float, required=True)
    sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("analyze", help="sparsity diagnostics over captured rows")
    sp.add_argument("mode", choices=["entropy", "mass", "spans", "correlate"])
    sp.add_argument("--rows", help="row capture file (entropy/mass/spans)")
    sp.add_argument("--p", type=float, default=0.75, help="mass fraction")
    sp.add_argument("--spans", help="JSON file with [[start, end], ...]")
    sp.add_argument("--pairs", help="JSON file with {x: [...], y: [...]}")
    sp.add_argument("--aggregate", default="mean-of-entropies",
                    choices=["mean-of-entropies", "entropy-of-mean"])
    sp.add_argument("--topk", type=int, help="truncate+renormalize rows to top-k first")
    sp.add_argument("--out", required=True)
    sp.add_argument("--csv", help="optional CSV sidecar for plotting")

    sp = sub.add_parser("capture", help="capture dense attention rows during generation")
    _add_model_flags(sp)
    sp.add_argument("--tokens", help="prompt token file; omit for random prompts")
    sp.add_argument("--token-format", choices=["text", "u32"], default="text")
    sp.add_argument("--n-context", type=int, default=256)
    sp.add_argument("--samples", type=int, default=50)
    sp.add_argument("--steps", type=int, default=10, help="generated tokens captured per sample")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("bench", help="benchmark harnesses")
    sp.add_argument("bench_kind", choices=["niah", "scaling"])
    sp.add_argument("--lengths", default="10000", help="comma-separated context lengths")
    sp.add_argument("--depths", default="0,0.25,0.5,0.75,1.0")
    sp.add_argument("--k", default="1,10")
    sp.add_argument("--kinds", default="flat,graph")
    sp.add_argument("--workdir", default=".")
    sp.add_argument("--ef-construction", type=int, default=64)
    sp.add_argument("--format", choices=["json", "csv"], default="json")
    sp.add_argument("--no-timings", action="store_true",
                    help="strip wall time / rss for byte-stable reports")
    sp.add_argument("--out", required=True)
    return p


def _cmd_prefill(args) -> None:
    model = build_model(_model_from_args(args))
    tokens = read_tokens(args.tokens, args.token_format)
    mode, _, w = args.prefill_mode.partition(":")
    meta = prefill_to_file(
        model, tokens, args.out, mode=mode,
        window=int(w) if w else 128, chunk_rows=args.chunk_rows,
    )
    print(f"wrote cache {args.out}: N={meta.n_tokens} L={meta.n_layers} "
          f"H={meta.n_heads} d={meta.head_dim}")


def _cmd_index(args) -> None:
    with CacheFile(args.cache) as cache:
        params = GraphParams(args.m, args.ef_construction, args.seed)
        ixs = build_index_set(cache, args.kind, params)
        save_index_set(ixs, args.out)
    print(f"wrote {args.kind} index {args.out}")


def _cmd_decode(args) -> None:
    with CacheFile(args.cache) as cache:
        cfg = ModelConfig.from_model_id(cache.meta.model_id)
        model = build_model(cfg)
        indices = load_index_set(args.index, cache)
        budget = parse_budget_spec(args.budget, cfg.n_layers)
        if args.start_tokens:
            seeds = read_tokens(args.start_tokens, args.token_format)
        elif args.start_token is not None:
            seeds = [args.start_token]
        else:
            raise InputError("decode needs --start-tokens or --start-token")
        tokens, steps = generate(
            model, ValueTier(cache), indices, budget, args.n_max,
            seed_tokens=seeds, sampler=args.sampler, temperature=args.temperature,
            sample_seed=args.seed, ef_search=args.ef_search, combine=args.combine,
            pinned_prefix=args.pinned_prefix,
        )
    if args.accounting:
        with open(args.accounting, "w") as f:
            for s in steps:
                f.write(json.dumps({
                    "step": s["step"], "cold_reads": s["cold_reads"],
                    "bytes_moved": s["bytes_moved"], "per_layer_k": s["per_layer_k"],
                }) + "\n")
    if args.out:
        write_tokens(args.out, tokens, args.token_format)
    print(" ".join(str(t) for t in tokens))


def _cmd_task(args) -> None:
    import os

    model = build_model(_model_from_args(args))
    task = make_needle_task(model, args.n, args.depth, args.seed)
    os.makedirs(args.out, exist_ok=True)
    write_tokens(os.path.join(args.out, "context.tokens"), task.haystack)
    write_tokens(os.path.join(args.out, "probe.tokens"), task.probe_prompt)
    with open(os.path.join(args.out, "task.json"), "w") as f:
        json.dump(
            {
                "n_context": task.n_context,
                "needle_pos": task.needle_pos,
                "needle_token": task.needle_token,
                "probe_prompt": list(task.probe_prompt),
                "expected_answer": task.expected_answer,
                "certified_heads": list(task.certified_heads),
                "margin": task.margin,
                "model_id": model.model_id,
            },
            f, indent=2,
        )
    print(f"wrote needle task to {args.out}")


def _load_rows(args):
    if not args.rows:
        raise InputError("this analyze mode needs --rows")
    rows = analysis.read_rows(args.rows)
    if args.topk:
        rows = [
            analysis.AttnRow(analysis.topk_truncate(r.probs, args.topk), r.layer, r.head, r.token_pos)
            for r in rows
        ]
    return rows


def _cmd_analyze(args) -> None:
    if args.mode == "entropy":
        rows = _load_rows(args)
        n_layers = max(r.layer for r in rows) + 1
        n_heads = max(r.head for r in rows) + 1
        rep = analysis.entropy_report(
            rows, n_layers, n_heads, rows[0].probs.size, aggregate=args.aggregate
        )
        report = {
            "aggregate": args.aggregate,
            "layer_mean_entropy": rep.layer_means().tolist(),
            "max_entropy": rep.max_entropy,
            "mean_entropy": rep.mean_entropy.tolist(),
            "sample_count": rep.sample_count.tolist(),
        }
        csv_rows = [("layer", "mean_entropy")] + [
            (l, e) for l, e in enumerate(rep.layer_means())
        ]
    elif args.mode == "mass":
        rows = _load_rows(args)
        counts = [analysis.mass_coverage(r, args.p) for r in rows]
        report = {
            "p": args.p,
            "counts": counts,
            "mean": float(np.mean(counts)),
            "median": float(np.median(counts)),
            "max": int(np.max(counts)),
            "min": int(np.min(counts)),
        }
        csv_rows = [("row", "count")] + list(enumerate(counts))
    elif args.mode == "spans":
        if not args.spans:
            raise InputError("spans mode needs --spans")
        rows = _load_rows(args)
        with open(args.spans) as f:
            spans = [tuple(s) for s in json.load(f)]
        means = analysis.per_span_attention(rows, spans)
        report = {"spans": [list(s) for s in spans], "mean_attention": means.tolist()}
        csv_rows = [("span_start", "span_end", "mean_attention")] + [
            (s[0], s[1], m) for s, m in zip(spans, means)
        ]
    else:
        if not args.pairs:
            raise InputError("correlate mode needs --pairs")
        with open(args.pairs) as f:
            pairs = json.load(f)
        report = {"pearson_r": analysis.pearson_r(pairs["x"], pairs["y"])}
        csv_rows = [("pearson_r",), (report["pearson_r"],)]
    with open(args.out, "w") as f:
        f.write(analysis.report_to_json(report) + "\n")
    if args.csv:
        import csv as _csv

        with open(args.csv, "w", newline="") as f:
            _csv.writer(f).writerows(csv_rows)
    print(f"wrote {args.mode} report to {args.out}")


def _cmd_capture(args) -> None:
    model = build_model(_model_from_args(args))
    rows = []
    if args.tokens:
        prompts = [read_tokens(args.tokens, args.token_format)]
    else:
        rng = child_rng(args.seed, 0xCAB)
        prompts = [
            rng.integers(0, model.cfg.vocab, size=args.n_context)
            for _ in range(args.samples)
        ]
    for i, prompt in enumerate(prompts):
        _, captured = dense_generate(
            model, prompt, n_max=args.steps, sample_seed=args.seed + i,
            capture_steps=args.steps,
        )
        rows.extend(captured)
    analysis.write_rows(args.out, rows)
    print(f"captured {len(rows)} rows to {args.out}")


def _cmd_bench(args) -> None:
    lengths = [int(x) for x in args.lengths.split(",")]
    if args.bench_kind == "niah":
        depths = [float(x) for x in args.depths.split(",")]
        ks = [int(x) for x in args.k.split(",")]
        kinds = args.kinds.split(",")
        results = run_niah_grid(
            lengths, depths, ks, seed=args.seed, kinds=kinds,
            workdir=args.workdir, graph_ef_construction=args.ef_construction,
        )
    else:
        results = run_scaling_bench(
            lengths, k=int(args.k.split(",")[0]), seed=args.seed,
            graph_ef_construction=args.ef_construction,
        )
    emit_report(results, args.out, fmt=args.format, include_timings=not args.no_timings)
    print(f"wrote {len(results)} results to {args.out}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper())
    if args.threads and args.threads > 0:
        try:
            import numba

            numba.set_num_threads(args.threads)
        except (ImportError, ValueError):
            pass
    try:
        handler = {
            "prefill": _cmd_prefill,
            "index": _cmd_index,
            "decode": _cmd_decode,
            "task": _cmd_task,
            "analyze": _cmd_analyze,
            "capture": _cmd_capture,
            "bench": _cmd_bench,
        }[args.command]
        handler(args)
    except TopkKvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
