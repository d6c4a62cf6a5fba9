"""Composite-token construction and layer-adaptive budget allocation.

Each kv head sorts its context tokens by importance; slot k of a layer
then holds, for every head, that head's k-th most important token. Slots
are scored by aggregating the sorted per-head scores, pooled globally
across layers, and the retention budget goes to the best slots wherever
they live. Because per-head rows are sorted, a layer's kept slots are
always a prefix, so the compressed cache stays a dense tensor per layer.

Slot order in the compressed cache is score order, not original position;
attention does not care (keys are cached post-rotation), and prefix
budgets make nestedness across compression ratios immediate.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baselines import Policy, select_baseline_indices
from .errors import ConfigError, ShapeError, UsageError
from .model import HeadMaskSet, KVCache, Model, PrefillResult, prefill
from .numerics import SeededRng, argsort_desc, stable_floor
from .scoring import (
    STAGE_FINAL,
    AggregationChoice,
    AttentionCapture,
    ScoreTensor,
    TaskSet,
    collect_attention,
    score_pipeline,
)


@dataclass
class CompositeIndex:
    idx: np.ndarray  # (L, H_kv, N) int64; per-head descending-importance permutation
    s_prime: np.ndarray  # (L, H_kv, N); scores gathered into slot order


@dataclass
class LayerImportance:
    values: np.ndarray  # (L, N), rows non-increasing


@dataclass
class BudgetAllocation:
    r_target: float
    budget_total: int
    layer_budgets: np.ndarray  # (L,) int64, sums to budget_total


@dataclass
class CompressedCache(KVCache):
    """KVCache plus, for every slot, the original context index it came from."""

    provenance: list[np.ndarray] | None = None  # per layer (H_kv, N_l) int64

    def clone(self) -> "CompressedCache":
        return CompressedCache(
            keys=[k.copy() for k in self.keys],
            values=[v.copy() for v in self.values],
            next_positions=list(self.next_positions),
            provenance=[p.copy() for p in self.provenance],
        )


@dataclass
class CompressReport:
    policy: str
    r_target: float
    r_achieved: float
    budget_total: int
    layer_budgets: list[int]

    def summary(self) -> str:
        budgets = ",".join(str(b) for b in self.layer_budgets)
        return (
            f"policy={self.policy} r_target={self.r_target} "
            f"r_achieved={self.r_achieved} budget_total={self.budget_total} "
            f"budgets={budgets}"
        )


def retention_budget(r_target: float, layers: int, context_len: int) -> int:
    """Total slots kept across all layers at the target ratio."""
    if not 0.0 <= r_target <= 1.0:
        raise UsageError(f"r_target must be in [0, 1], got {r_target}")
    return stable_floor((1.0 - r_target) * layers * context_len)


def composite_indices(s: ScoreTensor) -> CompositeIndex:
    """Per-head descending sort of the final scores (ties keep lower index)."""
    if s.stage != STAGE_FINAL:
        raise UsageError(f"composite_indices expects stage {STAGE_FINAL!r}, got {s.stage!r}")
    layers, heads, n = s.values.shape
    idx = np.empty((layers, heads, n), dtype=np.int64)
    s_prime = np.empty((layers, heads, n))
    for layer in range(layers):
        for h in range(heads):
            order = argsort_desc(s.values[layer, h])
            idx[layer, h] = order
            s_prime[layer, h] = s.values[layer, h, order]
    return CompositeIndex(idx=idx, s_prime=s_prime)


def layer_importance(ci: CompositeIndex, op: str) -> LayerImportance:
    """Marginalize slot scores over heads; rows stay non-increasing."""
    if op == "max":
        values = ci.s_prime.max(axis=1)
    elif op == "avg":
        values = ci.s_prime.mean(axis=1)
    else:
        raise UsageError(f"unknown aggregation op {op!r}")
    return LayerImportance(values=values)


def allocate_budgets(importance: LayerImportance, r_target: float) -> BudgetAllocation:
    """Pool slot scores across layers and keep the global top-B.

    Ties break by score descending, then lower layer, then lower slot, so
    the allocation is a deterministic function of the scores. Kept slots
    at each layer form a prefix because importance rows are non-increasing
    and the tie rule prefers lower slots.
    """
    layers, n = importance.values.shape
    budget = retention_budget(r_target, layers, n)
    flat = importance.values.reshape(-1)
    layer_ids, slot_ids = np.divmod(np.arange(flat.size), n)
    order = np.lexsort((slot_ids, layer_ids, -flat))  # primary key last
    keep = order[:budget]
    layer_budgets = np.bincount(layer_ids[keep], minlength=layers).astype(np.int64)
    return BudgetAllocation(
        r_target=r_target, budget_total=budget, layer_budgets=layer_budgets
    )


def compact_cache(
    cache: KVCache, ci: CompositeIndex, alloc: BudgetAllocation
) -> CompressedCache:
    """Gather each head's top rows into the slot-ordered compressed cache."""
    layers, heads, n = ci.idx.shape
    if cache.layer_count != layers:
        raise ShapeError(f"cache has {cache.layer_count} layers, index {layers}")
    keys, values, provenance = [], [], []
    for layer in range(layers):
        n_l = int(alloc.layer_budgets[layer])
        if n_l > n:
            raise UsageError(f"layer {layer} budget {n_l} exceeds context length {n}")
        if cache.rows(layer) != n:
            raise UsageError(
                f"compact_cache needs the uncompressed cache; layer {layer} has "
                f"{cache.rows(layer)} rows for context length {n}"
            )
        take = ci.idx[layer, :, :n_l]  # (H_kv, n_l)
        keys.append(np.take_along_axis(cache.keys[layer], take[:, :, None], axis=1).copy())
        values.append(
            np.take_along_axis(cache.values[layer], take[:, :, None], axis=1).copy()
        )
        provenance.append(take.copy())
    return CompressedCache(
        keys=keys,
        values=values,
        next_positions=[n] * layers,
        provenance=provenance,
    )


def gather_cache(cache: KVCache, kept: list[np.ndarray]) -> CompressedCache:
    """Build a compressed cache from explicit per-layer (H_kv, n_l) index arrays."""
    keys, values, provenance = [], [], []
    n = cache.rows(0)
    for layer, take in enumerate(kept):
        take = np.asarray(take, dtype=np.int64)
        if take.ndim == 1:  # same indices for every head
            take = np.broadcast_to(take, (cache.keys[layer].shape[0], take.size)).copy()
        keys.append(np.take_along_axis(cache.keys[layer], take[:, :, None], axis=1).copy())
        values.append(
            np.take_along_axis(cache.values[layer], take[:, :, None], axis=1).copy()
        )
        provenance.append(take)
    return CompressedCache(
        keys=keys,
        values=values,
        next_positions=[n] * len(kept),
        provenance=provenance,
    )


def unstructured_compress(s: ScoreTensor, r_target: float) -> HeadMaskSet:
    """Keep the globally best (layer, head, token) entries, as boolean masks.

    The budget counts per-head entries, floor((1-r) * L * H_kv * N), so a
    given ratio removes the same fraction of cache entries as the
    structured path. Evaluation applies the masks pre-softmax; no memory
    is actually freed.
    """
    if s.stage != STAGE_FINAL:
        raise UsageError(f"unstructured_compress expects stage {STAGE_FINAL!r}")
    if not 0.0 <= r_target <= 1.0:
        raise UsageError(f"r_target must be in [0, 1], got {r_target}")
    layers, heads, n = s.values.shape
    budget = stable_floor((1.0 - r_target) * layers * heads * n)
    flat = s.values.reshape(-1)
    order = np.lexsort((np.arange(flat.size), -flat))  # ties -> lower (l, h, c)
    masks = np.zeros(flat.size, dtype=bool)
    masks[order[:budget]] = True
    return HeadMaskSet(masks=masks.reshape(layers, heads, n), budget=budget)


def split_budget_uniform(budget_total: int, layers: int) -> np.ndarray:
    """Uniform per-layer split; the first (budget mod L) layers take the remainder."""
    base, extra = divmod(budget_total, layers)
    return np.asarray([base + (1 if l < extra else 0) for l in range(layers)], dtype=np.int64)


def random_structured_indices(
    n: int, layer_budgets: np.ndarray, kv_heads: int, seed: int
) -> list[np.ndarray]:
    """Uniform-random structured eviction: per head, a random kept subset."""
    rng = SeededRng(seed)
    kept = []
    for n_l in layer_budgets:
        rows = [sorted(rng.sample(n, int(n_l))) for _ in range(kv_heads)]
        kept.append(np.asarray(rows, dtype=np.int64))
    return kept


def compress(
    model: Model,
    context: list[int],
    task_set: TaskSet,
    agg_choice: AggregationChoice,
    r_target: float,
    policy: Policy,
    *,
    context_prefill: PrefillResult | None = None,
    capture: AttentionCapture | None = None,
) -> tuple[CompressedCache, CompressReport]:
    """Full structured path: score, compose, allocate, compact (or a baseline).

    ``context_prefill``/``capture`` may be passed to reuse work across
    ratios; results are identical either way.
    """
    cfg = model.config
    n = len(context)
    base = context_prefill if context_prefill is not None else prefill(model, context)
    budget = retention_budget(r_target, cfg.layers, n)

    if policy.name == "kvcompose":
        cap = capture if capture is not None else collect_attention(
            model, context, task_set, context_prefill=base
        )
        scores = score_pipeline(cap, cfg.kv_heads, agg_choice)
        ci = composite_indices(scores)
        importance = layer_importance(ci, agg_choice.agg_head)
        alloc = allocate_budgets(importance, r_target)
        compressed = compact_cache(base.cache, ci, alloc)
        layer_budgets = alloc.layer_budgets
    elif policy.name == "random":
        layer_budgets = split_budget_uniform(budget, cfg.layers)
        kept = random_structured_indices(n, layer_budgets, cfg.kv_heads, policy.seed)
        compressed = gather_cache(base.cache, kept)
    elif policy.name == "unstructured":
        raise ConfigError("unstructured policy produces masks; use unstructured_compress")
    else:
        kept = select_baseline_indices(
            model, context, policy, budget, base, capture=capture, task_set=task_set
        )
        compressed = gather_cache(base.cache, kept)
        layer_budgets = np.asarray([k.shape[-1] for k in kept], dtype=np.int64)

    total = int(sum(int(b) for b in layer_budgets))
    if total != budget:
        raise UsageError(f"policy {policy.name} kept {total} slots, budget is {budget}")
    report = CompressReport(
        policy=policy.name,
        r_target=r_target,
        r_achieved=1.0 - total / (cfg.layers * n),
        budget_total=budget,
        layer_budgets=[int(b) for b in layer_budgets],
    )
    return compressed, report
