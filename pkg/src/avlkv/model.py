"""A deterministic toy decoder-only transformer with pluggable cache policies.

Architecture: learned absolute position embeddings added at the input,
pre-norm blocks (RMSNorm, eps 1e-5), multi-head attention, SiLU MLP and an
output head tied to the token embedding.  All matmuls go through the
fixed-order kernels in :mod:`avlkv.tensor`.

The prompt is laid out System, Vision, Instruction; vision tokens arrive as
pre-embedded vectors.  Surviving cache slots keep their original positions
after eviction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .cache import LayerKvCache, Segment, StatsRecorder, collect_stats, CacheStats
from .errors import ConfigError, PromptError, StateError
from .metrics import AttentionTrace, attention_score
from .policies import CachePolicy
from .tensor import (Rng64, indexed_gemm_inner, indexed_gemm_rows, matmul, rng_uniform,
                     rng_uniform_matrix, softmax_row, softmax_rows)

RMS_EPS = np.float32(1e-5)
WEIGHT_RANGE = 0.1


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 32
    d_ff: int = 128
    vocab_size: int = 64
    max_text_tokens: int = 64
    max_positions: int = 512

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{f.name} must be a positive integer, got {v!r}")
        if self.n_layers < 3:
            raise ConfigError("n_layers must be >= 3 (prefill pruning acts after layer 2)")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class LayerWeights:
    attn_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    mlp_norm: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass
class DecoderWeights:
    token_embedding: np.ndarray
    position_embedding: np.ndarray
    layers: list[LayerWeights]
    final_norm: np.ndarray

    def tensors(self):
        """All tensors in serialisation order."""
        yield self.token_embedding
        yield self.position_embedding
        for lw in self.layers:
            yield from (lw.attn_norm, lw.wq, lw.wk, lw.wv, lw.wo, lw.mlp_norm, lw.w_up, lw.w_down)
        yield self.final_norm


def weight_shapes(config: ModelConfig) -> list[tuple[int, ...]]:
    d, f = config.d_model, config.d_ff
    shapes = [(config.vocab_size, d), (config.max_positions, d)]
    for _ in range(config.n_layers):
        shapes += [(d,), (d, d), (d, d), (d, d), (d, d), (d,), (d, f), (f, d)]
    shapes.append((d,))
    return shapes


def weights_from_tensors(config: ModelConfig, tensors: list[np.ndarray]) -> DecoderWeights:
    it = iter(tensors)
    tok, pos = next(it), next(it)
    layers = [LayerWeights(*(next(it) for _ in range(8))) for _ in range(config.n_layers)]
    return DecoderWeights(tok, pos, layers, next(it))


def init_weights(config: ModelConfig, seed: int) -> DecoderWeights:
    """Weights drawn from one SplitMix64 stream seeded with ``seed``.

    Matrices are filled in serialisation order (token embedding, position
    embedding, then per layer Wq, Wk, Wv, Wo, W_up, W_down), each row-major,
    uniform in [-0.1, 0.1].  Norm scales are ones and consume no draws.
    """
    if not isinstance(config, ModelConfig):
        raise ConfigError("init_weights needs a ModelConfig")
    rng = Rng64(seed)
    tensors = []
    for shape in weight_shapes(config):
        if len(shape) == 1:
            tensors.append(np.ones(shape, dtype=np.float32))
        else:
            mat, rng = rng_uniform_matrix(rng, shape, -WEIGHT_RANGE, WEIGHT_RANGE)
            tensors.append(mat)
    return weights_from_tensors(config, tensors)


def synthetic_vision(seed: int, count: int, d_model: int) -> np.ndarray:
    """Stand-in visual-encoder output: ``count x d_model`` uniform [-0.1, 0.1] from ``seed``."""
    mat, _ = rng_uniform_matrix(Rng64(seed), (count, d_model), -WEIGHT_RANGE, WEIGHT_RANGE)
    return mat


@dataclass
class SegmentedPrompt:
    system_tokens: list[int]
    vision_embeddings: np.ndarray
    instruction_tokens: list[int]

    def __post_init__(self):
        self.system_tokens = [int(t) for t in self.system_tokens]
        self.instruction_tokens = [int(t) for t in self.instruction_tokens]
        self.vision_embeddings = np.asarray(self.vision_embeddings, dtype=np.float32)
        if self.vision_embeddings.ndim != 2 or self.vision_embeddings.shape[0] < 1:
            raise PromptError("prompt needs at least one vision embedding row")
        if not self.instruction_tokens:
            raise PromptError("prompt needs a non-empty instruction")

    @property
    def n_system(self) -> int:
        return len(self.system_tokens)

    @property
    def n_vision(self) -> int:
        return self.vision_embeddings.shape[0]

    @property
    def n_instruction(self) -> int:
        return len(self.instruction_tokens)

    def __len__(self) -> int:
        return self.n_system + self.n_vision + self.n_instruction

    def segments(self) -> np.ndarray:
        return np.concatenate([
            np.full(self.n_system, Segment.SYSTEM, dtype=np.int8),
            np.full(self.n_vision, Segment.VISION, dtype=np.int8),
            np.full(self.n_instruction, Segment.INSTRUCTION, dtype=np.int8),
        ])

    def check(self, config: ModelConfig) -> None:
        if len(self) < 2:
            raise PromptError("assembled prompt must hold at least 2 tokens")
        if self.vision_embeddings.shape[1] != config.d_model:
            raise PromptError(
                f"vision embeddings have width {self.vision_embeddings.shape[1]}, model needs {config.d_model}")
        for t in self.system_tokens + self.instruction_tokens:
            if not 0 <= t < config.vocab_size:
                raise PromptError(f"token id {t} outside vocabulary of {config.vocab_size}")
        if len(self) > config.max_positions:
            raise PromptError(f"prompt length {len(self)} exceeds max_positions {config.max_positions}")


# --------------------------------------------------------------------------- forward pieces


def rms_norm(x: np.ndarray, scale: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True, dtype=np.float32)
    return (x / np.sqrt(ms + RMS_EPS) * scale).astype(np.float32)


def silu(x: np.ndarray) -> np.ndarray:
    return (x / (np.float32(1.0) + np.exp(-x))).astype(np.float32)


def _mlp(h: np.ndarray, lw: LayerWeights) -> np.ndarray:
    x = rms_norm(h, lw.mlp_norm)
    return h + matmul(silu(matmul(x, lw.w_up)), lw.w_down)


def _logits(h: np.ndarray, weights: DecoderWeights) -> np.ndarray:
    return matmul(rms_norm(h, weights.final_norm), weights.token_embedding.T)


def _embed_prompt(weights: DecoderWeights, prompt: SegmentedPrompt) -> np.ndarray:
    tok = weights.token_embedding
    parts = [tok[prompt.system_tokens].reshape(-1, tok.shape[1]),
             prompt.vision_embeddings,
             tok[prompt.instruction_tokens]]
    h = np.concatenate(parts, axis=0).astype(np.float32)
    return h + weights.position_embedding[:len(prompt)]


@dataclass
class PrefillRecord:
    """What prefill did: kept vision ordinals and per-layer vision counts."""

    retained_vision: np.ndarray
    vision_present: list[int] = field(default_factory=list)
    vision_stored: list[int] = field(default_factory=list)


@dataclass
class Session:
    """Mutable state of one generation: caches, policy, counters, trace."""

    weights: DecoderWeights
    config: ModelConfig
    policy: CachePolicy
    caches: list[LayerKvCache]
    prompt_len: int
    next_position: int
    stats: StatsRecorder
    trace: AttentionTrace | None = None


def prefill(weights: DecoderWeights, config: ModelConfig, prompt: SegmentedPrompt,
            policy: CachePolicy, *, trace: bool = False):
    """Run the prompt through every layer, building and pruning the caches.

    Returns ``(last_logits, session, record)``.  Layer 2's scores for the final
    position decide which vision tokens layers 3..L see; after each layer the
    policy may evict from that layer's cache.
    """
    prompt.check(config)
    policy.reset(config.max_text_tokens, prompt.n_vision)
    H, dh = config.n_heads, config.d_head
    scale = np.float32(1.0 / math.sqrt(dh))

    h = _embed_prompt(weights, prompt)
    positions = np.arange(len(prompt), dtype=np.int64)
    segs = prompt.segments()
    vision_ordinal = np.where(segs == Segment.VISION, np.cumsum(segs == Segment.VISION) - 1, -1)
    record = PrefillRecord(retained_vision=np.arange(prompt.n_vision))
    caches = []
    att_trace = AttentionTrace() if trace else None

    for li, lw in enumerate(weights.layers):
        layer = li + 1
        n = h.shape[0]
        x = rms_norm(h, lw.attn_norm)
        q, k, v = matmul(x, lw.wq), matmul(x, lw.wk), matmul(x, lw.wv)
        cache = LayerKvCache(config.d_model, capacity=n + 16)
        cache.extend(k, v, positions, segs)

        heads = []
        last_rows = []
        for hd in range(H):
            cols = slice(hd * dh, (hd + 1) * dh)
            logits = matmul(q[:, cols], k[:, cols].T) * scale
            w = softmax_rows(logits, lengths=np.arange(1, n + 1))
            heads.append(matmul(w, v[:, cols]))
            last_rows.append(w[-1])
        h = h + matmul(np.concatenate(heads, axis=1), lw.wo)
        scores = attention_score(last_rows)

        is_vis = segs == Segment.VISION
        record.vision_present.append(int(is_vis.sum()))
        if att_trace is not None:
            att_trace.add(layer, 0, positions, segs, scores)
        if layer == 2:
            keep = policy.prefill_retain(scores[is_vis])
            if keep is not None:
                record.retained_vision = np.asarray(keep, dtype=np.int64)
        policy.after_prefill_layer(layer, cache, scores)
        record.vision_stored.append(len(cache.rows_of(Segment.VISION)))
        caches.append(cache)

        h = _mlp(h, lw)
        if layer == 2 and record.retained_vision.size < prompt.n_vision:
            rows = ~is_vis | np.isin(vision_ordinal, record.retained_vision)
            h, positions, segs, vision_ordinal = h[rows], positions[rows], segs[rows], vision_ordinal[rows]

    session = Session(weights, config, policy, caches, len(prompt), len(prompt),
                      StatsRecorder(config.d_model, config.n_heads), att_trace)
    return _logits(h[-1:], weights)[0], session, record


def decode_step(session: Session, token_id: int, step: int) -> np.ndarray:
    """Feed one token at decode step ``step`` (1-based); returns next-token logits.

    The token's K/V is appended to every layer as a generated slot; attention
    reads exactly ``policy.used_rows`` through the indexed kernels.
    """
    cfg, weights, policy = session.config, session.weights, session.policy
    if step < 1:
        raise StateError(f"decode steps start at 1, got {step}")
    if len(session.caches) != cfg.n_layers or any(c.d_model != cfg.d_model for c in session.caches):
        raise StateError("caches do not match the model config")
    if not 0 <= token_id < cfg.vocab_size:
        raise StateError(f"token id {token_id} outside vocabulary")
    pos = session.next_position
    if pos >= cfg.max_positions:
        raise StateError(f"position {pos} exceeds max_positions {cfg.max_positions}")
    H, dh = cfg.n_heads, cfg.d_head
    scale = np.float32(1.0 / math.sqrt(dh))
    full_slots = session.prompt_len + step

    h = (weights.token_embedding[token_id] + weights.position_embedding[pos])[None, :].astype(np.float32)
    for li, (lw, cache) in enumerate(zip(weights.layers, session.caches)):
        layer = li + 1
        x = rms_norm(h, lw.attn_norm)
        q, k, v = matmul(x, lw.wq), matmul(x, lw.wk), matmul(x, lw.wv)
        cache.extend(k, v, [pos], [Segment.GENERATED])
        used = policy.used_rows(layer, cache, step)

        heads = []
        rows = []
        for hd in range(H):
            cols = slice(hd * dh, (hd + 1) * dh)
            logits = indexed_gemm_rows(q[:, cols], cache.keys[:, cols], used) * scale
            w = softmax_row(logits[0])[None, :]
            heads.append(indexed_gemm_inner(w, cache.values[:, cols], used))
            rows.append(w[0])
        h = h + matmul(np.concatenate(heads, axis=1), lw.wo)
        scores = attention_score(rows)

        session.stats.record(layer, step, cache, used, full_slots)
        if session.trace is not None:
            session.trace.add(layer, step, cache.positions[used], cache.segments[used], scores)
        policy.after_decode_layer(layer, cache, used, scores, step)
        h = _mlp(h, lw)

    session.next_position = pos + 1
    return _logits(h, weights)[0]


def greedy_token(logits: np.ndarray) -> int:
    """Argmax with ties going to the lowest token id."""
    return int(np.argmax(logits))


@dataclass
class GenerationResult:
    tokens: list[int]
    stats: CacheStats
    trace: AttentionTrace | None = None
    records: StatsRecorder | None = None
    prefill: PrefillRecord | None = None
    logits: list[np.ndarray] = field(default_factory=list)


def generate(weights: DecoderWeights, config: ModelConfig, prompt: SegmentedPrompt,
             policy: CachePolicy, max_new_tokens: int, *, trace: bool = False,
             eos_token: int | None = None) -> GenerationResult:
    """Greedy decoding.

    The first token comes from the prefill logits; decode step ``t`` feeds
    token ``t`` into the caches and its logits pick token ``t + 1``.  So
    ``max_new_tokens`` tokens cost exactly ``max_new_tokens`` decode steps, and
    the cache accounting covers every generated token.  Generation stops early
    after feeding ``eos_token``.
    """
    if max_new_tokens < 1:
        raise ConfigError("max_new_tokens must be >= 1")
    last, session, record = prefill(weights, config, prompt, policy, trace=trace)
    tokens: list[int] = []
    all_logits = [last]
    tok = greedy_token(last)
    for t in range(1, max_new_tokens + 1):
        tokens.append(tok)
        logits = decode_step(session, tok, t)
        all_logits.append(logits)
        if eos_token is not None and tok == eos_token:
            break
        tok = greedy_token(logits)
    return GenerationResult(tokens, collect_stats(session.stats), session.trace, session.stats,
                            record, all_logits)
