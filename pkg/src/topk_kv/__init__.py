"""Top-k KV-cache decoding and analysis toolkit.

Prefill a key/value cache to disk, index every (layer, head)'s keys for
maximum-inner-product search, then decode by retrieving only the top-k cache
entries per step alongside a hot window of freshly generated tokens, with
per-layer k budgets and attention-sparsity diagnostics.
"""

from .analysis import (
    AttnRow,
    EntropyReport,
    attn_entropy,
    entropy_report,
    k_required,
    mass_coverage,
    pearson_r,
    per_span_attention,
)
from .ann import (
    GraphParams,
    IndexSet,
    MipsIndex,
    TopKResult,
    build_index,
    build_index_set,
    knn_search,
    load_index_set,
    recall_at_k,
    save_index_set,
)
from .attention import GenWindow, TierAccounting, ValueTier, decode_step, generate, topk_attend
from .budget import LayerBudget, entropy_budget, linear_budget, parse_budget_spec, uniform_budget
from .cache import (
    CacheChunk,
    CacheFile,
    CacheFileWriter,
    CacheMeta,
    KvCache,
    MemoryCacheSink,
    cache_bytes,
    read_cache,
    write_cache,
)
from .model import ModelConfig, TinyModel, build_model, dense_generate, forward_dense
from .prefill import prefill_chunked
from .tasks import MultiDocTask, NeedleTask, make_multidoc_task, make_needle_grid, make_needle_task
from .tensor import matvec, seeded_rng, softmax

__version__ = "0.1.0"
