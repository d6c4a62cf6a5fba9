"""Structured eviction baselines: sinks+window, online eviction, window top-k,
and a depth-decreasing budget schedule.

All selectors return ascending original-token indices and keep the same
count in every kv head of a layer, so their outputs drop into the same
dense cache layout as the composite path.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError
from .model import Model, PrefillResult, prefill
from .numerics import argsort_desc, stable_floor
from .scoring import AttentionCapture, TaskSet, collect_attention

POLICY_NAMES = (
    "kvcompose",
    "streaming",
    "tova",
    "snapkv",
    "pyramid",
    "random",
    "unstructured",
)


@dataclass(frozen=True)
class Policy:
    """An eviction policy and its parameters.

    sinks: leading tokens always kept by streaming.
    window: trailing tokens kept (and scored over) by snapkv/pyramid.
    shape: slope of the pyramid schedule; 0 degenerates to uniform.
    seed: stream for the random-eviction control.
    """

    name: str
    sinks: int = 2
    window: int = 4
    shape: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.name not in POLICY_NAMES:
            raise ConfigError(f"unknown policy {self.name!r}; expected one of {POLICY_NAMES}")
        if self.sinks < 1:
            raise ConfigError(f"sinks must be >= 1, got {self.sinks}")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if self.shape < 0:
            raise ConfigError(f"shape must be >= 0, got {self.shape}")


def streaming_select(n: int, budget: int, sinks: int) -> list[int]:
    """First ``sinks`` tokens plus the trailing window, ascending."""
    if budget < sinks:
        raise ConfigError(f"budget {budget} smaller than sink count {sinks}")
    if budget > n:
        raise ConfigError(f"budget {budget} exceeds context length {n}")
    kept = set(range(sinks)) | set(range(n - (budget - sinks), n))
    return sorted(kept)


def _tova_replay(layer_rows: np.ndarray, budget: int) -> list[int]:
    """Replay one layer's recorded attention, evicting the least-attended token."""
    kept: list[int] = []
    for m in range(layer_rows.shape[0]):
        kept.append(m)
        if len(kept) > budget:
            scores = layer_rows[m, kept]
            kept.pop(int(np.argmin(scores)))  # ties: first = lowest index
    return kept


def tova_select(
    model: Model,
    context: list[int],
    budget: int | list[int],
    base: PrefillResult | None = None,
) -> list[list[int]]:
    """Per-layer survivors of online least-attended eviction.

    The current step's attention is the newest token's row, averaged over
    the layer's query heads; the newest token itself is evictable.
    """
    run = base if base is not None else prefill(model, context)
    layers = model.config.layers
    budgets = [budget] * layers if isinstance(budget, int) else list(budget)
    if any(b < 1 for b in budgets):
        raise ConfigError(f"tova budget must be >= 1 per layer, got {budgets}")
    out = []
    for layer in range(layers):
        layer_rows = run.attention[layer].mean(axis=0)  # (N, N)
        out.append(_tova_replay(layer_rows, budgets[layer]))
    return out


def snapkv_select(
    cap: AttentionCapture,
    budget_per_head: int | list[int],
    window: int,
) -> list[np.ndarray]:
    """Window top-k per kv head: keep the trailing window plus the tokens it
    attends to hardest (max-pool over the last ``window`` capture rows).

    Returns one (H_kv, budget) index array per layer; counts are uniform
    across heads, the sets need not be.
    """
    n = cap.context_len
    layers, query_heads = cap.A.shape[0], cap.A.shape[1]
    kv_heads = cap.value_norms_raw.shape[1]
    group = query_heads // kv_heads
    budgets = [budget_per_head] * layers if isinstance(budget_per_head, int) else list(
        budget_per_head
    )
    if window > n:
        raise ConfigError(f"window {window} exceeds context length {n}")
    for b in budgets:
        if b < window:
            raise ConfigError(f"budget {b} smaller than window {window}")
        if b > n:
            raise ConfigError(f"budget {b} exceeds context length {n}")

    rows = min(window, cap.task_len)
    out = []
    for layer in range(layers):
        per_head = []
        for h in range(kv_heads):
            block = cap.A[layer, h * group : (h + 1) * group]  # (G, N, M)
            scores = block.mean(axis=0)[:, -rows:].max(axis=1)  # (N,)
            budget = budgets[layer]
            window_start = n - window
            order = argsort_desc(scores[:window_start])
            picked = order[: budget - window]
            kept = np.sort(np.concatenate([picked, np.arange(window_start, n)]))
            per_head.append(kept)
        out.append(np.stack(per_head).astype(np.int64))
    return out


def pyramid_budgets(layers: int, context_len: int, r_target: float, shape: float) -> np.ndarray:
    """Linearly decreasing per-layer budgets summing to floor((1-r)*L*N).

    Budgets are clamped to [1, context_len]; shape=0 gives the uniform
    split with the remainder placed on the earliest layers.
    """
    if shape < 0:
        raise ConfigError(f"shape must be >= 0, got {shape}")
    if not 0.0 <= r_target <= 1.0:
        raise UsageError(f"r_target must be in [0, 1], got {r_target}")
    total = stable_floor((1.0 - r_target) * layers * context_len)
    return _schedule_budgets(layers, context_len, total, shape)


def _schedule_budgets(layers: int, context_len: int, total: int, shape: float) -> np.ndarray:
    if total < layers:
        raise ConfigError(
            f"budget {total} cannot give every one of {layers} layers its floor of 1"
        )
    if total > layers * context_len:
        raise ConfigError(f"budget {total} exceeds cache capacity {layers * context_len}")
    denom = max(layers - 1, 1)
    weights = np.asarray([1.0 + shape * (layers - 1 - l) / denom for l in range(layers)])

    fixed: dict[int, int] = {}
    active = list(range(layers))
    remaining = total
    while active:
        wsum = sum(weights[l] for l in active)
        raw = {l: remaining * weights[l] / wsum for l in active}
        over = [l for l in active if raw[l] > context_len]
        if over:
            for l in over:
                fixed[l] = context_len
                remaining -= context_len
            active = [l for l in active if l not in over]
            continue
        under = [l for l in active if raw[l] < 1.0]
        if under:
            for l in under:
                fixed[l] = 1
                remaining -= 1
            active = [l for l in active if l not in under]
            continue
        break
    if not active and remaining != 0:
        raise ConfigError(f"cannot schedule budget {total} over {layers} layers")

    budgets = np.zeros(layers, dtype=np.int64)
    for l, b in fixed.items():
        budgets[l] = b
    if active:
        base = {l: int(np.floor(raw[l])) for l in active}
        leftover = remaining - sum(base.values())
        order = sorted(active, key=lambda l: (-(raw[l] - base[l]), l))
        for l in order:
            if leftover == 0:
                break
            if base[l] < context_len:
                base[l] += 1
                leftover -= 1
        for l, b in base.items():
            budgets[l] = b
    return budgets


def select_baseline_indices(
    model: Model,
    context: list[int],
    policy: Policy,
    budget_total: int,
    base: PrefillResult,
    capture: AttentionCapture | None = None,
    task_set: TaskSet | None = None,
) -> list[np.ndarray]:
    """Dispatch a baseline policy into per-layer kept-index arrays.

    Per-layer budgets come from the uniform split (pyramid supplies its
    own schedule); sink and window parameters are clamped to each layer's
    budget so every grid ratio stays feasible.
    """
    layers = model.config.layers
    n = len(context)
    base_split, extra = divmod(budget_total, layers)
    uniform = [base_split + (1 if l < extra else 0) for l in range(layers)]

    if policy.name == "streaming":
        return [
            np.asarray(
                streaming_select(n, b, min(policy.sinks, b)), dtype=np.int64
            )
            for b in uniform
        ]
    if policy.name == "tova":
        return [np.asarray(k, dtype=np.int64) for k in tova_select(model, context, uniform, base)]
    if policy.name in ("snapkv", "pyramid"):
        if policy.name == "pyramid":
            budgets = _schedule_budgets(layers, n, budget_total, policy.shape)
        else:
            budgets = np.asarray(uniform, dtype=np.int64)
        window = int(min(policy.window, budgets.min(), n))
        if capture is None:
            cap_tasks = task_set
            if cap_tasks is None or cap_tasks.mode != "task-agnostic":
                cap_tasks = TaskSet(mode="task-agnostic", observation_window=min(policy.window, n))
            capture = collect_attention(model, context, cap_tasks, context_prefill=base)
        per_layer = snapkv_select(capture, [int(b) for b in budgets], window)
        return per_layer
    raise ConfigError(f"no baseline selector for policy {policy.name!r}")
