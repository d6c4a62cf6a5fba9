"""Evaluation protocol: compression ratio, rewards, degradation, sweeps.

Rewards are deterministic proxies in [0, 1]: exact key->value recall on
the constructed lookup model, and teacher-forced top-1 agreement with the
full-cache run for arbitrary models. Degradation epsilon is the mean
relative reward drop versus the full cache; curves sweep the ratio grid
and are summarized by span-normalized AUC and the largest ratio whose
epsilon stays under a tolerance.
"""
from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .baselines import Policy
from .composer import compress, unstructured_compress
from .errors import ConfigError, UsageError
from .model import (
    HeadMaskSet,
    KVCache,
    Model,
    PrefillResult,
    decode_step,
    greedy_decode,
    induction_key_range,
    induction_value_range,
    prefill,
)
from .numerics import SeededRng
from .scoring import (
    AggregationChoice,
    AttentionCapture,
    TaskSet,
    collect_attention,
    score_pipeline,
)

RATIO_GRID = (0.0, 0.1, 0.25, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
DEFAULT_TOLERANCES = (0.10, 0.20)
DEFAULT_AGREEMENT_STEPS = 32


@dataclass(frozen=True)
class TaskInstance:
    id: str
    kind: str  # "recall" | "agreement"
    prompt: tuple[int, ...]  # context to compress
    query: tuple[int, ...]  # tokens fed after compression (recall only)
    answer: tuple[int, ...]  # paired value, or the reference continuation

    def __post_init__(self):
        if not self.prompt:
            raise UsageError("task prompt must be non-empty")
        if self.kind not in ("recall", "agreement"):
            raise UsageError(f"unknown task kind {self.kind!r}")


@dataclass
class CurvePoint:
    r_target: float
    r_achieved: float
    reward_mean: float
    reward_std: float
    epsilon: float
    kl_mean: float


@dataclass
class ToleranceResult:
    tolerance: float
    r_grid: float
    r_interpolated: float


@dataclass
class EvalReport:
    policy: str
    points: list[CurvePoint]
    auc: float
    tolerance_results: list[ToleranceResult]
    seeds: list[int]
    config: dict = field(default_factory=dict)


# --- cache size arithmetic ----------------------------------------------------


def kv_entry_count(layers: int, kv_heads: int, rows: int, head_dim: int) -> int:
    """Scalar entries of a uniform cache; the factor 2 covers keys and values."""
    return layers * kv_heads * rows * head_dim * 2


def cache_entry_count(cache: KVCache) -> int:
    total = 0
    for k in cache.keys:
        h, rows, dh = k.shape
        total += h * rows * dh * 2
    return total


def compression_ratio(compressed: KVCache, full: KVCache) -> float:
    """r = 1 - |compressed entries| / |full entries|."""
    full_entries = cache_entry_count(full)
    if full_entries == 0:
        raise UsageError("full cache is empty")
    return 1.0 - cache_entry_count(compressed) / full_entries


# --- task construction --------------------------------------------------------


def make_recall_tasks(
    num_pairs: int, vocab: int, count: int, seed: int
) -> list[TaskInstance]:
    """Key->value lookup prompts: distinct keys, values from the value half."""
    rng = SeededRng(seed)
    keys_range = list(induction_key_range(vocab))
    values_range = list(induction_value_range(vocab))
    if num_pairs > len(keys_range):
        raise ConfigError(f"num_pairs {num_pairs} exceeds key range {len(keys_range)}")
    tasks = []
    for t in range(count):
        keys = [keys_range[i] for i in rng.sample(len(keys_range), num_pairs)]
        values = [values_range[rng.randint(len(values_range))] for _ in range(num_pairs)]
        j = rng.randint(num_pairs)
        prompt = []
        for a, b in zip(keys, values):
            prompt.extend([a, b])
        tasks.append(
            TaskInstance(
                id=f"recall-{t}",
                kind="recall",
                prompt=tuple(prompt),
                query=(keys[j],),
                answer=(values[j],),
            )
        )
    return tasks


def make_agreement_tasks(
    model: Model,
    count: int,
    context_len: int,
    steps: int,
    seed: int,
) -> list[TaskInstance]:
    """Random contexts whose reference continuation is the full-cache greedy run.

    The answer stores the common start token followed by ``steps`` greedy
    tokens; agreement rewards compare argmax per step under teacher
    forcing with exactly this history.
    """
    if steps < 1:
        raise UsageError("steps must be >= 1")
    rng = SeededRng(seed)
    vocab = model.config.vocab_size
    tasks = []
    for t in range(count):
        prompt = tuple(rng.randint(vocab) for _ in range(context_len))
        run = prefill(model, list(prompt))
        start = int(np.argmax(run.logits[-1]))
        continuation = greedy_decode(model, run.cache, start, steps)
        tasks.append(
            TaskInstance(
                id=f"agreement-{t}",
                kind="agreement",
                prompt=prompt,
                query=(),
                answer=(start, *continuation),
            )
        )
    return tasks


def task_set_for(task: TaskInstance, mode: str, observation_window: int) -> TaskSet:
    """The scoring task set matching one evaluation task."""
    if mode == "task-agnostic":
        return TaskSet(
            mode="task-agnostic",
            observation_window=min(observation_window, len(task.prompt)),
        )
    if task.kind == "recall":
        return TaskSet(mode="task-aware", tasks=(tuple(task.query),))
    # agreement: the known downstream tokens are the reference continuation
    return TaskSet(mode="task-aware", tasks=(tuple(task.answer),))


# --- rewards ------------------------------------------------------------------


def _forced_steps(task: TaskInstance) -> tuple[list[int], list[int]]:
    """(inputs, targets) for the teacher-forced comparison."""
    if task.kind == "recall":
        inputs = list(task.query)
        targets = [task.answer[0]]
        # all query tokens but the last are fed without being scored
        return inputs, targets
    start, *continuation = task.answer
    return [start] + list(continuation[:-1]), list(continuation)


def _run_steps(
    model: Model,
    cache: KVCache,
    task: TaskInstance,
    head_masks: HeadMaskSet | None,
) -> list[np.ndarray]:
    """Teacher-forced logits for each scored step, on a cloned cache."""
    work = cache.clone()
    position = work.next_position
    inputs, targets = _forced_steps(task)
    logits_out: list[np.ndarray] = []
    if task.kind == "recall":
        for tok in inputs[:-1]:
            decode_step(model, work, tok, position, head_masks=head_masks)
            position += 1
        logits_out.append(decode_step(model, work, inputs[-1], position, head_masks=head_masks))
    else:
        for tok in inputs:
            logits_out.append(decode_step(model, work, tok, position, head_masks=head_masks))
            position += 1
    assert len(logits_out) == len(targets)
    return logits_out


def reward(
    model: Model,
    cache: KVCache,
    task: TaskInstance,
    head_masks: HeadMaskSet | None = None,
) -> float:
    """Score in [0, 1]: exact recall, or per-step argmax agreement."""
    logits = _run_steps(model, cache, task, head_masks)
    _, targets = _forced_steps(task)
    hits = sum(1 for lg, t in zip(logits, targets) if int(np.argmax(lg)) == t)
    return hits / len(targets)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    return z - np.log(np.exp(z).sum())


def _reward_and_kl(
    model: Model,
    cache: KVCache,
    task: TaskInstance,
    reference_logits: list[np.ndarray],
    head_masks: HeadMaskSet | None = None,
) -> tuple[float, float]:
    """Reward plus mean KL(full || compressed) of next-token distributions."""
    logits = _run_steps(model, cache, task, head_masks)
    _, targets = _forced_steps(task)
    hits = 0
    kls = []
    for lg, ref, t in zip(logits, reference_logits, targets):
        if int(np.argmax(lg)) == t:
            hits += 1
        ref_logp = _log_softmax(ref)
        comp_logp = _log_softmax(lg)
        p = np.exp(ref_logp)
        kls.append(float(np.sum(p * (ref_logp - comp_logp))))
    return hits / len(targets), float(np.mean(kls))


def epsilon(full_rewards: list[float], comp_rewards: list[float]) -> float:
    """Mean relative degradation; tasks with zero full reward are excluded."""
    if len(full_rewards) != len(comp_rewards):
        raise UsageError("reward lists differ in length")
    terms = []
    skipped = 0
    for rf, rc in zip(full_rewards, comp_rewards):
        if rf == 0.0:
            skipped += 1
            continue
        terms.append((rf - rc) / rf)
    if skipped:
        warnings.warn(f"epsilon skipped {skipped} task(s) with zero full-cache reward")
    if not terms:
        return 0.0
    return float(np.mean(terms))


# --- curve metrics ------------------------------------------------------------


def auc(points: list[CurvePoint]) -> float:
    """Trapezoidal reward-vs-ratio area, normalized by the ratio span."""
    if len(points) < 2:
        raise UsageError("auc needs at least two curve points")
    rs = np.asarray([p.r_target for p in points])
    rewards = np.asarray([p.reward_mean for p in points])
    if np.unique(rs).size != rs.size:
        raise UsageError("auc needs distinct ratios")
    span = rs.max() - rs.min()
    area = np.sum((rewards[1:] + rewards[:-1]) / 2.0 * np.diff(rs))
    return float(area / span)


def max_ratio_under_tolerance(points: list[CurvePoint], tolerance: float) -> ToleranceResult:
    """Largest grid ratio with epsilon <= tolerance, plus a linear refinement.

    The refined estimate interpolates between the last passing and first
    failing grid points; with no failing point it equals the grid value,
    with no passing point both are 0.
    """
    if not points or points[0].r_target != 0.0:
        raise UsageError("tolerance search expects a curve starting at r=0")
    best = None
    for i, p in enumerate(points):  # largest passing ratio, even on bumpy curves
        if p.epsilon <= tolerance:
            best = i
    if best is None:
        return ToleranceResult(tolerance=tolerance, r_grid=0.0, r_interpolated=0.0)
    r_grid = points[best].r_target
    if best + 1 >= len(points):
        return ToleranceResult(tolerance=tolerance, r_grid=r_grid, r_interpolated=r_grid)
    nxt = points[best + 1]
    de = nxt.epsilon - points[best].epsilon
    if de <= 0:
        r_interp = nxt.r_target
    else:
        frac = (tolerance - points[best].epsilon) / de
        r_interp = r_grid + frac * (nxt.r_target - r_grid)
    return ToleranceResult(tolerance=tolerance, r_grid=r_grid, r_interpolated=r_interp)


# --- sweeps -------------------------------------------------------------------


def _thread_count() -> int:
    raw = os.environ.get("KVCOMPOSE_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError as exc:
        raise ConfigError(f"KVCOMPOSE_THREADS must be an integer, got {raw!r}") from exc
    return max(threads, 1)


@dataclass
class _TaskState:
    task: TaskInstance
    base: PrefillResult
    capture: AttentionCapture | None
    full_reward: float
    reference_logits: list[np.ndarray]


def _prepare_task(
    model: Model,
    task: TaskInstance,
    mode: str,
    observation_window: int,
    policy: Policy,
) -> _TaskState:
    base = prefill(model, list(task.prompt))
    tset = task_set_for(task, mode, observation_window)
    capture = None
    if policy.name in ("kvcompose", "unstructured", "snapkv", "pyramid"):
        capture = collect_attention(model, list(task.prompt), tset, context_prefill=base)
    reference = _run_steps(model, base.cache, task, head_masks=None)
    full_r = reward(model, base.cache, task)
    return _TaskState(
        task=task,
        base=base,
        capture=capture,
        full_reward=full_r,
        reference_logits=reference,
    )


def _evaluate_point(
    model: Model,
    state: _TaskState,
    policy: Policy,
    agg_choice: AggregationChoice,
    mode: str,
    observation_window: int,
    r_target: float,
) -> tuple[float, float, float]:
    """(r_achieved, reward, kl) for one task at one ratio."""
    cfg = model.config
    n = len(state.task.prompt)
    if policy.name == "unstructured":
        scores = score_pipeline(state.capture, cfg.kv_heads, agg_choice)
        masks = unstructured_compress(scores, r_target)
        r_achieved = 1.0 - masks.budget / (cfg.layers * cfg.kv_heads * n)
        r, kl = _reward_and_kl(
            model, state.base.cache, state.task, state.reference_logits, head_masks=masks
        )
        return r_achieved, r, kl
    tset = task_set_for(state.task, mode, observation_window)
    cache, report = compress(
        model,
        list(state.task.prompt),
        tset,
        agg_choice,
        r_target,
        policy,
        context_prefill=state.base,
        capture=state.capture,
    )
    r, kl = _reward_and_kl(model, cache, state.task, state.reference_logits)
    return report.r_achieved, r, kl


def sweep(
    model: Model,
    tasks: list[TaskInstance],
    policy: Policy,
    agg_choice: AggregationChoice,
    grid: tuple[float, ...] = RATIO_GRID,
    mode: str = "task-agnostic",
    observation_window: int = 32,
) -> list[CurvePoint]:
    """One curve point per grid ratio, averaged over all tasks.

    Results are reduced in (ratio, task) order whatever the execution
    order, so the curve is identical with any KVCOMPOSE_THREADS setting.
    """
    if not tasks:
        raise UsageError("sweep needs at least one task")
    if list(grid) != sorted(grid):
        raise UsageError("ratio grid must be sorted ascending")

    threads = _thread_count()

    def prep(task: TaskInstance) -> _TaskState:
        return _prepare_task(model, task, mode, observation_window, policy)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            states = list(pool.map(prep, tasks))
    else:
        states = [prep(t) for t in tasks]

    full_rewards = [s.full_reward for s in states]
    points = []
    for r_target in grid:
        def evaluate(state: _TaskState) -> tuple[float, float, float]:
            return _evaluate_point(
                model, state, policy, agg_choice, mode, observation_window, r_target
            )

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(evaluate, states))
        else:
            results = [evaluate(s) for s in states]
        achieved = [res[0] for res in results]
        rewards = [res[1] for res in results]
        kls = [res[2] for res in results]
        points.append(
            CurvePoint(
                r_target=float(r_target),
                r_achieved=float(np.mean(achieved)),
                reward_mean=float(np.mean(rewards)),
                reward_std=float(np.std(rewards)),
                epsilon=epsilon(full_rewards, rewards),
                kl_mean=float(np.mean(kls)),
            )
        )
    return points


def build_report(
    policy: Policy,
    points: list[CurvePoint],
    seeds: list[int],
    config: dict | None = None,
    tolerances: tuple[float, ...] = DEFAULT_TOLERANCES,
) -> EvalReport:
    # a one-point grid has no span; its AUC is the constant-curve limit
    area = auc(points) if len(points) > 1 else points[0].reward_mean
    return EvalReport(
        policy=policy.name,
        points=points,
        auc=area,
        tolerance_results=[max_ratio_under_tolerance(points, t) for t in tolerances],
        seeds=list(seeds),
        config=dict(config or {}),
    )
