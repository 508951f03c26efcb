"""Per-layer k allocation under a fixed total budget.

Three strategies: uniform, linearly increasing with depth, and proportional to
measured per-layer attention entropy. All of them hand out whole tokens with
largest-remainder rounding, keep the sum exactly equal to the requested total,
and give every layer at least one slot.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InfeasibleBudgetError

ENTROPY_WEIGHT_FLOOR = 1e-3


@dataclass(frozen=True)
class LayerBudget:
    """The per-layer k assignment produced by a budgeting strategy."""

    k_per_layer: tuple[int, ...]
    total: int = field(default=0)

    def __post_init__(self):
        ks = tuple(int(k) for k in self.k_per_layer)
        object.__setattr__(self, "k_per_layer", ks)
        total = self.total if self.total else sum(ks)
        object.__setattr__(self, "total", total)
        if sum(ks) != total:
            raise ConfigError(f"budget entries sum to {sum(ks)}, expected {total}")
        if any(k < 1 for k in ks):
            raise ConfigError("every layer needs k >= 1")

    @property
    def n_layers(self) -> int:
        return len(self.k_per_layer)

    def __getitem__(self, layer: int) -> int:
        return self.k_per_layer[layer]


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Round total*w/sum(w) to integers, sum-preserving.

    Leftover units go to the largest fractional parts; ties prefer the larger
    weight (keeps ramps monotone), then the lower layer index.
    """
    quota = total * weights / weights.sum()
    base = np.floor(quota).astype(np.int64)
    frac = quota - base
    order = sorted(range(len(weights)), key=lambda i: (-frac[i], -weights[i], i))
    for i in order[: total - int(base.sum())]:
        base[i] += 1
    return base


def _allocate(weights, total: int) -> tuple[int, ...]:
    w = np.asarray(weights, dtype=np.float64)
    n = len(w)
    if total < n:
        raise InfeasibleBudgetError(f"total {total} cannot give {n} layers k >= 1")
    k = _largest_remainder(w, total)

    # Lift zero-k layers to 1, paid for by the largest entries. Among equally
    # large entries, take from the lowest-weight one so ordering survives.
    while (k < 1).any():
        k[int(np.argmax(k == 0))] += 1
        maxima = np.flatnonzero(k == k.max())
        k[maxima[int(np.argmin(w[maxima]))]] -= 1

    # Allocation must follow the weight ordering: w_i < w_j implies k_i <= k_j.
    # The rounding rules above already guarantee this; fail loudly if not.
    by_w = sorted(range(n), key=lambda i: (w[i], i))
    for a, b in zip(by_w, by_w[1:]):
        if w[a] < w[b] and k[a] > k[b]:
            raise AssertionError(f"allocation broke weight ordering: {k.tolist()}")
    assert int(k.sum()) == total
    return tuple(int(x) for x in k)


def uniform_budget(n_layers: int, total: int) -> LayerBudget:
    """Same k everywhere; a remainder of r gives +1 to the first r layers."""
    if total < n_layers:
        raise InfeasibleBudgetError(f"total {total} < n_layers {n_layers}")
    base, rem = divmod(total, n_layers)
    ks = tuple(base + 1 if i < rem else base for i in range(n_layers))
    return LayerBudget(ks, total)


def linear_budget(n_layers: int, total: int) -> LayerBudget:
    """k grows linearly with depth: layer weights 1, 2, ..., L."""
    return LayerBudget(_allocate(np.arange(1, n_layers + 1), total), total)


def entropy_budget(n_layers: int, total: int, layer_entropies) -> LayerBudget:
    """k proportional to each layer's measured attention entropy."""
    ent = np.asarray(layer_entropies, dtype=np.float64)
    if ent.shape != (n_layers,):
        raise ConfigError(f"need {n_layers} entropies, got shape {ent.shape}")
    if (ent < 0).any():
        raise ConfigError("entropies must be nonnegative")
    return LayerBudget(_allocate(ent + ENTROPY_WEIGHT_FLOOR, total), total)


def parse_budget_spec(spec: str, n_layers: int) -> LayerBudget:
    """Parse the CLI budget grammar.

    uniform:K        every layer gets K (total = K*L)
    linear:B         total budget B on the linear ramp
    entropy:B:FILE   total budget B weighted by per-layer entropies in FILE (json list)
    explicit:[k1,...,kL]
    """
    kind, _, rest = spec.partition(":")
    try:
        if kind == "uniform":
            return uniform_budget(n_layers, int(rest) * n_layers)
        if kind == "linear":
            return linear_budget(n_layers, int(rest))
        if kind == "entropy":
            b, _, path = rest.partition(":")
            if not path:
                raise ConfigError("entropy budget needs entropy:B:FILE")
            with open(path) as f:
                return entropy_budget(n_layers, int(b), json.load(f))
        if kind == "explicit":
            ks = json.loads(rest)
            if len(ks) != n_layers:
                raise ConfigError(f"explicit budget needs {n_layers} entries")
            return LayerBudget(tuple(int(k) for k in ks))
    except (ValueError, OSError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad budget spec {spec!r}: {exc}") from exc
    raise ConfigError(f"unknown budget strategy {kind!r}")
