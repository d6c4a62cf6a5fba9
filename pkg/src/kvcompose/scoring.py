"""Turn captured attention into per-layer, per-kv-head token importance.

The pipeline is three reductions over the raw 4-D attention tensor:

    A[l, h_q, c, m]   task tokens m attending to context tokens c
      -> aggregate over m            (task aggregation, optionally norm-weighted)
      -> aggregate over query groups (GQA reduction to kv heads)
      -> add the cross-head mean     (mean augmentation)

yielding S[l, h_kv, c] >= 0, the score every eviction decision is based on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, UsageError
from .model import Model, PrefillResult, prefill

AGG_OPS = ("max", "avg")
NORM_VARIANTS = ("none", "v-norm", "vo-norm")

STAGE_TASK = "agg_task"
STAGE_GROUP = "agg_group"
STAGE_FINAL = "final"


@dataclass(frozen=True)
class TaskSet:
    """What the scoring queries are.

    task-aware: every task is a token sequence appended to the context;
    its tokens' attention rows are the signal. task-agnostic: the last
    ``observation_window`` context tokens play that role.
    """

    mode: str  # "task-aware" | "task-agnostic"
    tasks: tuple[tuple[int, ...], ...] = ()
    observation_window: int = 32

    def __post_init__(self):
        if self.mode not in ("task-aware", "task-agnostic"):
            raise UsageError(f"unknown task set mode {self.mode!r}")
        if self.mode == "task-aware":
            if not self.tasks or any(len(t) == 0 for t in self.tasks):
                raise UsageError("task-aware mode needs at least one non-empty task")
        else:
            if self.observation_window < 1:
                raise UsageError("observation_window must be >= 1")


@dataclass(frozen=True)
class AggregationChoice:
    agg_task: str = "max"
    agg_group: str = "avg"
    agg_head: str = "avg"
    norm_variant: str = "none"
    mean_augment: bool = True

    def __post_init__(self):
        for name in ("agg_task", "agg_group", "agg_head"):
            if getattr(self, name) not in AGG_OPS:
                raise UsageError(f"{name} must be one of {AGG_OPS}")
        if self.norm_variant not in NORM_VARIANTS:
            raise UsageError(f"norm_variant must be one of {NORM_VARIANTS}")

    def label(self) -> str:
        mean = "on" if self.mean_augment else "off"
        return (
            f"Agg({self.agg_task},{self.agg_group},{self.agg_head}), "
            f"mean={mean}, norm={self.norm_variant}"
        )


@dataclass
class AttentionCapture:
    """Raw signal for scoring one context.

    A has axes [layer, query head, context token, task token]; every task
    row is a probability distribution over its full (causal) key range, of
    which only the context columns are kept here. Value norms are recorded
    per kv head (raw) and per query head (projected through that head's
    output matrix).
    """

    A: np.ndarray  # (L, H_q, N, M)
    value_norms_raw: np.ndarray  # (L, H_kv, N)
    value_norms_proj: np.ndarray  # (L, H_q, N)
    context_len: int
    task_len: int


@dataclass
class ScoreTensor:
    stage: str
    values: np.ndarray  # (L, H, N); H = H_q at STAGE_TASK, H_kv afterwards


def _reduce(values: np.ndarray, op: str, axis: int) -> np.ndarray:
    if op == "max":
        return values.max(axis=axis)
    return values.mean(axis=axis)


def collect_attention(
    model: Model,
    context: list[int],
    task_set: TaskSet,
    context_prefill: PrefillResult | None = None,
) -> AttentionCapture:
    """Record how the task tokens attend to the context, plus value norms.

    task-aware runs one prefill per task over ``context + task`` and keeps
    the task rows; task-agnostic reuses the context prefill and keeps the
    trailing observation-window rows. Norms come from the context's own
    value vectors, which are identical in every run.
    """
    if not context:
        raise UsageError("context must be non-empty")
    cfg = model.config
    n = len(context)
    base = context_prefill if context_prefill is not None else prefill(model, context)

    if task_set.mode == "task-agnostic":
        w = task_set.observation_window
        if w > n:
            raise UsageError(f"observation_window {w} exceeds context length {n}")
        blocks = [np.transpose(attn[:, n - w : n, :n], (0, 2, 1)) for attn in base.attention]
        a = np.stack(blocks, axis=0)  # (L, H_q, N, w)
    else:
        per_task = []
        for task in task_set.tasks:
            run = prefill(model, list(context) + list(task))
            rows = [
                np.transpose(attn[:, n : n + len(task), :n], (0, 2, 1))
                for attn in run.attention
            ]
            per_task.append(np.stack(rows, axis=0))  # (L, H_q, N, M_tau)
        a = np.concatenate(per_task, axis=3)

    raw = np.stack(
        [np.linalg.norm(v, axis=2) for v in base.cache.values], axis=0
    )  # (L, H_kv, N)
    proj = np.empty((cfg.layers, cfg.query_heads, n))
    group = cfg.group_size
    for layer in range(cfg.layers):
        for i in range(cfg.query_heads):
            projected = base.cache.values[layer][i // group] @ model.wo[layer][i]
            proj[layer, i] = np.linalg.norm(projected, axis=1)

    return AttentionCapture(
        A=a,
        value_norms_raw=raw,
        value_norms_proj=proj,
        context_len=n,
        task_len=a.shape[3],
    )


def aggregate_task(cap: AttentionCapture, op: str, norm_variant: str = "none") -> ScoreTensor:
    """Reduce the task axis, optionally weighting entries by value norms first.

    v-norm multiplies each attention entry by the raw value norm of the
    token's kv head; vo-norm uses the norm after the query head's output
    projection. Weighting happens entrywise, before the reduction.
    """
    if op not in AGG_OPS:
        raise UsageError(f"unknown aggregation op {op!r}")
    if norm_variant not in NORM_VARIANTS:
        raise UsageError(f"unknown norm variant {norm_variant!r}")
    if cap.task_len < 1:
        raise UsageError("capture holds no task tokens")
    a = cap.A
    if norm_variant == "v-norm":
        hq, hkv = a.shape[1], cap.value_norms_raw.shape[1]
        per_query = np.repeat(cap.value_norms_raw, hq // hkv, axis=1)  # (L, H_q, N)
        a = a * per_query[:, :, :, None]
    elif norm_variant == "vo-norm":
        a = a * cap.value_norms_proj[:, :, :, None]
    return ScoreTensor(stage=STAGE_TASK, values=_reduce(a, op, axis=3))


def aggregate_group(s: ScoreTensor, kv_heads: int, op: str) -> ScoreTensor:
    """Reduce query-head scores onto their kv heads."""
    if s.stage != STAGE_TASK:
        raise UsageError(f"aggregate_group expects stage {STAGE_TASK!r}, got {s.stage!r}")
    if op not in AGG_OPS:
        raise UsageError(f"unknown aggregation op {op!r}")
    layers, query_heads, n = s.values.shape
    if query_heads % kv_heads != 0:
        raise ShapeError(f"{query_heads} query heads do not split into {kv_heads} kv heads")
    group = query_heads // kv_heads
    grouped = s.values.reshape(layers, kv_heads, group, n)
    return ScoreTensor(stage=STAGE_GROUP, values=_reduce(grouped, op, axis=2))


def augment_mean(s: ScoreTensor, enabled: bool = True) -> ScoreTensor:
    """Add the cross-head mean score to every head (mild consensus prior)."""
    if s.stage != STAGE_GROUP:
        raise UsageError(f"augment_mean expects stage {STAGE_GROUP!r}, got {s.stage!r}")
    if not enabled:
        return ScoreTensor(stage=STAGE_FINAL, values=s.values.copy())
    mean = s.values.mean(axis=1, keepdims=True)
    return ScoreTensor(stage=STAGE_FINAL, values=s.values + mean)


def score_pipeline(
    cap: AttentionCapture, kv_heads: int, choice: AggregationChoice
) -> ScoreTensor:
    """collect -> task agg -> group agg -> mean augmentation, in one call."""
    s = aggregate_task(cap, choice.agg_task, choice.norm_variant)
    s = aggregate_group(s, kv_heads, choice.agg_group)
    return augment_mean(s, choice.mean_augment)
