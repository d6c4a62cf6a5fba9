"""Small decoder-only transformer with grouped-query attention.

The model is deliberately minimal: token embeddings (tied with the output
head), a stack of residual attention layers with rotary positions, and
nothing else. Weights are drawn from a counter-based generator so two
machines given the same config build bit-identical models.

Caches are ragged across layers: every layer stores the same number of
rows for each of its kv heads (the structured constraint), but layers may
hold different row counts after compression. Keys are cached post-rotation
at their original absolute positions and are never re-rotated, which makes
attention invariant to row order within a head.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError
from .numerics import SeededRng, softmax_rows

ROTARY_BASE = 10000.0


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    query_heads: int
    kv_heads: int
    model_dim: int
    head_dim: int
    vocab_size: int
    seed: int = 0
    max_context: int = 512

    def __post_init__(self):
        counts = {
            "layers": self.layers,
            "query_heads": self.query_heads,
            "kv_heads": self.kv_heads,
            "model_dim": self.model_dim,
            "head_dim": self.head_dim,
            "vocab_size": self.vocab_size,
            "max_context": self.max_context,
        }
        for name, value in counts.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.query_heads % self.kv_heads != 0:
            raise ConfigError(
                f"query_heads ({self.query_heads}) must be a multiple of "
                f"kv_heads ({self.kv_heads})"
            )
        if self.model_dim != self.query_heads * self.head_dim:
            raise ConfigError(
                f"model_dim ({self.model_dim}) must equal "
                f"query_heads*head_dim ({self.query_heads * self.head_dim})"
            )
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be even for rotary pairs, got {self.head_dim}")

    @property
    def group_size(self) -> int:
        return self.query_heads // self.kv_heads


@dataclass
class Model:
    """Immutable after construction; safe to share across threads."""

    config: ModelConfig
    embedding: np.ndarray  # (vocab, d)
    wq: np.ndarray  # (L, H_q, d, d_h)
    wk: np.ndarray  # (L, H_kv, d, d_h)
    wv: np.ndarray  # (L, H_kv, d, d_h)
    wo: np.ndarray  # (L, H_q, d_h, d)
    inv_freq: np.ndarray  # (d_h/2,) rotary inverse frequencies
    pos_embedding: np.ndarray | None = None  # (max_positions, d) absolute table


@dataclass
class KVCache:
    """Per-layer key/value rows, uniform across heads within a layer."""

    keys: list[np.ndarray]  # per layer (H_kv, n_l, d_h)
    values: list[np.ndarray]  # per layer (H_kv, n_l, d_h)
    next_positions: list[int]  # per layer, position of the next appended token

    @property
    def layer_count(self) -> int:
        return len(self.keys)

    @property
    def next_position(self) -> int:
        return max(self.next_positions)

    def rows(self, layer: int) -> int:
        return self.keys[layer].shape[1]

    def clone(self) -> "KVCache":
        return KVCache(
            keys=[k.copy() for k in self.keys],
            values=[v.copy() for v in self.values],
            next_positions=list(self.next_positions),
        )

    def append(self, layer: int, k_new: np.ndarray, v_new: np.ndarray, position: int) -> None:
        self.keys[layer] = np.concatenate([self.keys[layer], k_new[:, None, :]], axis=1)
        self.values[layer] = np.concatenate([self.values[layer], v_new[:, None, :]], axis=1)
        self.next_positions[layer] = position + 1


@dataclass
class PrefillResult:
    cache: KVCache
    logits: np.ndarray  # (N, vocab)
    attention: list[np.ndarray]  # per layer (H_q, N, N), rows are query positions


@dataclass
class HeadMaskSet:
    """Boolean keep-masks for attention patching of a full cache.

    masks[l, h, c] False means key/value row c of kv head h in layer l is
    hidden from every query (score forced to -inf). Rows appended after
    the masked context are always visible. No memory is saved; this exists
    to evaluate per-head independent eviction without breaking the uniform
    cache layout.
    """

    masks: np.ndarray  # (L, H_kv, N) bool
    budget: int = field(default=0)

    def __post_init__(self):
        if self.budget == 0:
            self.budget = int(self.masks.sum())

    def kept_counts(self) -> np.ndarray:
        return self.masks.sum(axis=2)


def _rotate(vecs: np.ndarray, positions: np.ndarray, inv_freq: np.ndarray) -> np.ndarray:
    """Rotary rotation of (..., n, d_h) vectors at the given absolute positions."""
    angles = positions[:, None].astype(np.float64) * inv_freq[None, :]  # (n, d_h/2)
    cos, sin = np.cos(angles), np.sin(angles)
    half = vecs.shape[-1] // 2
    a, b = vecs[..., :half], vecs[..., half:]
    return np.concatenate([a * cos - b * sin, a * sin + b * cos], axis=-1)


def _embed(model: Model, tokens: np.ndarray, positions: np.ndarray) -> np.ndarray:
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.config.vocab_size):
        raise UsageError(
            f"token ids must lie in [0, {model.config.vocab_size}), "
            f"got range [{int(tokens.min())}, {int(tokens.max())}]"
        )
    x = model.embedding[tokens]
    if model.pos_embedding is not None:
        if positions.size and positions.max() >= model.pos_embedding.shape[0]:
            raise UsageError(
                f"position {int(positions.max())} outside the positional table "
                f"({model.pos_embedding.shape[0]} slots)"
            )
        x = x + model.pos_embedding[positions]
    return x


def init_model(config: ModelConfig) -> Model:
    """Build a model with weights drawn from SeededRng(config.seed).

    Tensors are filled in a fixed order (embedding, then per layer
    wq, wk, wv, wo) with uniform values in [-1, 1) scaled by
    1/sqrt(model_dim), so the layout is stable across implementations.
    """
    rng = SeededRng(config.seed)
    scale = 1.0 / np.sqrt(config.model_dim)

    def draw(*shape: int) -> np.ndarray:
        n = int(np.prod(shape))
        return ((rng.uniform_block(n) * 2.0 - 1.0) * scale).reshape(shape)

    L, Hq, Hkv, d, dh = (
        config.layers,
        config.query_heads,
        config.kv_heads,
        config.model_dim,
        config.head_dim,
    )
    embedding = draw(config.vocab_size, d)
    wq = np.empty((L, Hq, d, dh))
    wk = np.empty((L, Hkv, d, dh))
    wv = np.empty((L, Hkv, d, dh))
    wo = np.empty((L, Hq, dh, d))
    for layer in range(L):
        wq[layer] = draw(Hq, d, dh)
        wk[layer] = draw(Hkv, d, dh)
        wv[layer] = draw(Hkv, d, dh)
        wo[layer] = draw(Hq, dh, d)
    half = dh // 2
    inv_freq = ROTARY_BASE ** (-np.arange(half, dtype=np.float64) / half)
    return Model(config, embedding, wq, wk, wv, wo, inv_freq)


def empty_cache(model: Model) -> KVCache:
    cfg = model.config
    shape = (cfg.kv_heads, 0, cfg.head_dim)
    return KVCache(
        keys=[np.zeros(shape) for _ in range(cfg.layers)],
        values=[np.zeros(shape) for _ in range(cfg.layers)],
        next_positions=[0] * cfg.layers,
    )


def prefill(model: Model, tokens: list[int]) -> PrefillResult:
    """Causal forward pass over ``tokens`` from position 0.

    Fills one K,V row per token per kv head per layer and keeps every
    attention row for later capture.
    """
    cfg = model.config
    n = len(tokens)
    if n == 0:
        raise UsageError("prefill needs at least one token")
    if n > cfg.max_context:
        raise UsageError(f"context of {n} tokens exceeds max_context {cfg.max_context}")
    positions = np.arange(n)
    x = _embed(model, np.asarray(tokens), positions)  # (n, d)

    cache = empty_cache(model)
    attention: list[np.ndarray] = []
    group = cfg.group_size
    causal = np.triu(np.full((n, n), -np.inf), k=1)  # 0 on/below diagonal

    for layer in range(cfg.layers):
        q = np.einsum("nd,hde->hne", x, model.wq[layer])  # (H_q, n, d_h)
        k = np.einsum("nd,hde->hne", x, model.wk[layer])  # (H_kv, n, d_h)
        v = np.einsum("nd,hde->hne", x, model.wv[layer])
        q = _rotate(q, positions, model.inv_freq)
        k = _rotate(k, positions, model.inv_freq)

        k_rep = np.repeat(k, group, axis=0)  # (H_q, n, d_h)
        v_rep = np.repeat(v, group, axis=0)
        scores = np.einsum("hme,hce->hmc", q, k_rep) + causal[None, :, :]
        attn = softmax_rows(
            scores.reshape(-1, n), scale=1.0 / np.sqrt(cfg.head_dim)
        ).reshape(cfg.query_heads, n, n)
        out = np.einsum("hmc,hce->hme", attn, v_rep)
        x = x + np.einsum("hme,hed->md", out, model.wo[layer])

        cache.keys[layer] = k.copy()
        cache.values[layer] = v.copy()
        cache.next_positions[layer] = n
        attention.append(attn)

    logits = x @ model.embedding.T
    return PrefillResult(cache=cache, logits=logits, attention=attention)


def decode_step(
    model: Model,
    cache: KVCache,
    token: int,
    position: int,
    head_masks: HeadMaskSet | None = None,
) -> np.ndarray:
    """Append ``token`` at ``position`` to every layer cache and return its logits.

    Layers may hold unequal row counts; each attends over whatever keys it
    has (plus the row just appended). ``head_masks``, when given, hides
    masked rows of the original context from attention; appended rows stay
    visible.
    """
    cfg = model.config
    x = _embed(model, np.asarray([token]), np.asarray([position]))[0]  # (d,)
    group = cfg.group_size
    pos_arr = np.asarray([position])

    for layer in range(cfg.layers):
        q = np.einsum("d,hde->he", x, model.wq[layer])  # (H_q, d_h)
        k_new = np.einsum("d,hde->he", x, model.wk[layer])  # (H_kv, d_h)
        v_new = np.einsum("d,hde->he", x, model.wv[layer])
        q = _rotate(q[:, None, :], pos_arr, model.inv_freq)[:, 0, :]
        k_new = _rotate(k_new[:, None, :], pos_arr, model.inv_freq)[:, 0, :]

        cache.append(layer, k_new, v_new, position)
        k = cache.keys[layer]  # (H_kv, rows, d_h)
        v = cache.values[layer]
        rows = k.shape[1]

        k_rep = np.repeat(k, group, axis=0)  # (H_q, rows, d_h)
        v_rep = np.repeat(v, group, axis=0)
        scores = np.einsum("he,hce->hc", q, k_rep)  # (H_q, rows)
        if head_masks is not None:
            width = head_masks.masks.shape[2]
            if width > rows - 1:
                raise UsageError(
                    f"mask covers {width} context rows but layer {layer} holds only "
                    f"{rows - 1}; attention patching needs the uncompacted cache"
                )
            mask_rep = np.repeat(head_masks.masks[layer], group, axis=0)  # (H_q, N)
            scores[:, :width] = np.where(mask_rep, scores[:, :width], -np.inf)
        attn = softmax_rows(scores, scale=1.0 / np.sqrt(cfg.head_dim))
        out = np.einsum("hc,hce->he", attn, v_rep)
        x = x + np.einsum("he,hed->d", out, model.wo[layer])

    return x @ model.embedding.T


def greedy_decode(
    model: Model,
    cache: KVCache,
    start: int,
    steps: int,
    head_masks: HeadMaskSet | None = None,
) -> list[int]:
    """Repeated decode_step with argmax selection (ties take the lowest id)."""
    if steps < 1:
        raise UsageError(f"steps must be >= 1, got {steps}")
    out: list[int] = []
    current = start
    position = cache.next_position
    for _ in range(steps):
        logits = decode_step(model, cache, current, position, head_masks=head_masks)
        current = int(np.argmax(logits))
        out.append(current)
        position += 1
    return out


# --- hand-constructed exact-recall model -------------------------------------
#
# Residual-channel layout (d = 2V + 4):
#   [0, V)        current-token one-hot
#   [V, 2V)       previous-token one-hot, written by layer 1
#   2V, 2V+1      cos/sin positional channels (from the absolute table)
#   2V+2          constant bias channel (set to 1 by every token embedding)
#   2V+3          position-zero flag
#
# Layer 1 head 0 matches position p-1 through the cos/sin channels and
# copies the attended token's one-hot into the previous-token block.
# Layer 2 head 0 matches "previous token == my token" (key-range tokens
# only), suppresses the degenerate position-0 row, and copies the matched
# value token back into the current-token block with gain 3 so it wins the
# tied output head. Query keys live in [0, V/2) and values in [V/2, V);
# prompts drawn that way are answered exactly at full cache.

INDUCTION_MAX_POSITIONS = 128
_MATCH_MARGIN = 60.0  # pre-softmax score gap that saturates attention
_POS0_PENALTY = 2.0
_COPY_GAIN = 3.0


def induction_key_range(vocab_size: int) -> range:
    return range(vocab_size // 2)


def induction_value_range(vocab_size: int) -> range:
    return range(vocab_size // 2, vocab_size)


def construct_induction_model(num_pairs: int, vocab: int) -> Model:
    """Two-layer attention model performing exact in-context key->value recall.

    For a prompt ``[a1 b1 a2 b2 ... ak bk aq]`` with distinct keys ``a_i``
    from the key half of the vocabulary and values from the value half,
    the greedy next token equals the value paired with ``aq``.
    """
    if vocab < 4 or vocab % 2 != 0:
        raise ConfigError(f"vocab must be an even number >= 4, got {vocab}")
    if num_pairs < 1 or num_pairs > vocab // 2:
        raise ConfigError(
            f"num_pairs must be in [1, {vocab // 2}] for vocab {vocab}, got {num_pairs}"
        )
    v = vocab
    d_h = v + 2
    d = 2 * v + 4
    config = ModelConfig(
        layers=2,
        query_heads=2,
        kv_heads=1,
        model_dim=d,
        head_dim=d_h,
        vocab_size=v,
        seed=0,
        max_context=INDUCTION_MAX_POSITIONS,
    )

    ch_prev = v  # start of the previous-token block
    ch_cos, ch_sin, ch_bias, ch_flag0 = 2 * v, 2 * v + 1, 2 * v + 2, 2 * v + 3
    head_bias = v  # bias channel inside the head space

    embedding = np.zeros((v, d))
    embedding[np.arange(v), np.arange(v)] = 1.0
    embedding[:, ch_bias] = 1.0

    omega = 2.0 * np.pi / (INDUCTION_MAX_POSITIONS + 1)
    positions = np.arange(INDUCTION_MAX_POSITIONS)
    pos_embedding = np.zeros((INDUCTION_MAX_POSITIONS, d))
    pos_embedding[:, ch_cos] = np.cos(omega * positions)
    pos_embedding[:, ch_sin] = np.sin(omega * positions)
    pos_embedding[0, ch_flag0] = 1.0

    wq = np.zeros((2, 2, d, d_h))
    wk = np.zeros((2, 1, d, d_h))
    wv = np.zeros((2, 1, d, d_h))
    wo = np.zeros((2, 2, d_h, d))
    sqrt_dh = np.sqrt(d_h)

    # Layer 1: previous-position head. Scores after the 1/sqrt(d_h)
    # division are s1 * cos(omega * (p - 1 - c)); the runner-up position
    # sits at least s1 * (1 - cos(omega)) below the true previous token.
    s1 = _MATCH_MARGIN / (1.0 - np.cos(omega)) * sqrt_dh
    wq[0, 0, ch_cos, 0] = s1 * np.cos(omega)
    wq[0, 0, ch_sin, 0] = s1 * np.sin(omega)
    wq[0, 0, ch_cos, 1] = -s1 * np.sin(omega)
    wq[0, 0, ch_sin, 1] = s1 * np.cos(omega)
    wk[0, 0, ch_cos, 0] = 1.0
    wk[0, 0, ch_sin, 1] = 1.0
    for t in range(v):
        wv[0, 0, t, t] = 1.0
        wo[0, 0, t, ch_prev + t] = 1.0

    # Layer 2: match-and-copy head. The query is the current token
    # restricted to the key range; keys are previous-token one-hots, with
    # the position-0 row pushed below every non-match.
    s2 = _MATCH_MARGIN * sqrt_dh
    for t in induction_key_range(v):
        wq[1, 0, t, t] = s2
        wk[1, 0, ch_prev + t, t] = 1.0
    wq[1, 0, ch_bias, head_bias] = s2
    wk[1, 0, ch_flag0, head_bias] = -_POS0_PENALTY
    for t in induction_value_range(v):
        wv[1, 0, t, t] = 1.0
        wo[1, 0, t, t] = _COPY_GAIN

    inv_freq = np.zeros(d_h // 2)  # rotary disabled; positions come from the table
    return Model(config, embedding, wq, wk, wv, wo, inv_freq, pos_embedding)
