"""Cache policies: A-VL adaptive attention and the full / H2O / StreamingLLM / FastV baselines.

Every policy implements the same hooks, called by the decoder with 1-based
layer numbers:

``reset(max_text_tokens, n_vision)``
    start of a session.
``prefill_retain(vision_scores)``
    after layer 2's attention in prefill; returns the vision ordinals that
    layers 3..L keep, or ``None`` to keep all.
``after_prefill_layer(layer, cache, scores)``
    once per layer, with the final prompt position's head-averaged scores over
    every row of ``cache``.
``used_rows(layer, cache, step)``
    cache rows attended at decode step ``step``.
``after_decode_layer(layer, cache, used, scores, step)``
    after that attention; ``scores`` aligns with ``used``.  Anything changed
    here is first seen by the next step.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .cache import TEXT_SEGMENTS, LayerKvCache, Segment, used_set
from .errors import ConfigError, PolicyError, StateError
from .ranking import clamp, percent_count, rank_desc, top_set


@dataclass(frozen=True)
class AvlPolicyConfig:
    """The five A-VL knobs, all percentages except ``update_every``.

    secondary_pct / core_pct are fractions of the original vision token count;
    text_window_pct is a fraction of ``ModelConfig.max_text_tokens``.
    """

    secondary_pct: float = 45.0
    core_pct: float = 30.0
    update_every: int = 3
    prefill_keep_pct: float = 90.0
    text_window_pct: float = 70.0

    def __post_init__(self):
        if not 0 < self.core_pct <= self.secondary_pct <= 100:
            raise ConfigError(
                f"need 0 < C <= S <= 100, got C={self.core_pct}, S={self.secondary_pct}")
        if int(self.update_every) != self.update_every or self.update_every < 1:
            raise ConfigError(f"K must be a positive integer, got {self.update_every}")
        if not 0 < self.prefill_keep_pct <= 100:
            raise ConfigError(f"P must be in (0, 100], got {self.prefill_keep_pct}")
        if not 0 < self.text_window_pct <= 100:
            raise ConfigError(f"T must be in (0, 100], got {self.text_window_pct}")

    @classmethod
    def identity(cls, update_every: int = 3) -> "AvlPolicyConfig":
        return cls(100, 100, update_every, 100, 100)


@dataclass(frozen=True)
class VisionClassification:
    secondary: np.ndarray
    core: np.ndarray
    minor: np.ndarray


def classify_vision(scores, config: AvlPolicyConfig, n_vision: int | None = None) -> VisionClassification:
    """Split candidate vision tokens into core / secondary / minor by score.

    ``scores`` holds one value per candidate; ``n_vision`` is the original
    vision count the percentages refer to (defaults to the candidate count).
    Returned sets are ascending candidate ordinals.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise PolicyError("classify_vision needs at least one candidate score")
    total = s.size if n_vision is None else n_vision
    n_sec = clamp(percent_count(config.secondary_pct, total), 1, s.size)
    n_core = clamp(percent_count(config.core_pct, total), 1, n_sec)
    order = rank_desc(s)
    return VisionClassification(
        secondary=np.sort(order[:n_sec]),
        core=np.sort(order[:n_core]),
        minor=np.sort(order[n_sec:]),
    )


def prefill_prune(scores, keep_pct: float) -> np.ndarray:
    """Vision ordinals kept for layers after the second, top ``keep_pct`` percent by score."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise PolicyError("prefill_prune needs at least one vision score")
    return top_set(s, clamp(percent_count(keep_pct, s.size), 1, s.size))


def is_update_step(t: int, update_every: int) -> bool:
    if t < 1:
        raise ValueError(f"decode steps are numbered from 1, got {t}")
    return t % update_every == 0


def update_core(scores_over_secondary, config: AvlPolicyConfig, *, n_vision: int, step: int) -> np.ndarray:
    """New core set (ordinals into the secondary list) from an update step's scores."""
    if not is_update_step(step, config.update_every):
        raise StateError(f"update_core called on non-update step {step} (K={config.update_every})")
    s = np.asarray(scores_over_secondary, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise PolicyError("update_core needs at least one secondary score")
    n_core = clamp(percent_count(config.core_pct, n_vision), 1, s.size)
    return top_set(s, n_core)


@dataclass(frozen=True)
class TextWindowState:
    window: int

    @classmethod
    def from_percent(cls, pct: float, max_text_tokens: int) -> "TextWindowState":
        return cls(percent_count(pct, max_text_tokens))

    def __post_init__(self):
        if self.window < 2:
            raise ConfigError(f"text window must hold at least 2 slots, got {self.window}")


def text_evictions(accumulated, window: int) -> np.ndarray:
    """Which live text slots (ordinals, oldest first) to evict to fit ``window``.

    Only the older half of the window is eligible; the newest ``ceil(W/2)``
    slots never are.  If the overflow exceeds ``floor(W/2)`` (possible only for
    an over-long prompt) the eligible range widens to exactly the overflow.
    """
    acc = np.asarray(accumulated, dtype=np.float64).reshape(-1)
    live = acc.size
    excess = live - window
    if excess <= 0:
        return np.zeros(0, dtype=np.int64)
    n_candidates = max(window // 2, excess)
    return top_set(-acc[:n_candidates], excess)


def text_step(cache: LayerKvCache, state: TextWindowState) -> np.ndarray:
    """Cache rows to evict so live text slots fit the window (scores already accumulated)."""
    rows = cache.rows_of(*TEXT_SEGMENTS)
    return rows[text_evictions(cache.scores[rows], state.window)]


# --------------------------------------------------------------------------- hook implementations


class CachePolicy:
    name = "full"

    def reset(self, max_text_tokens: int, n_vision: int) -> None:
        self.n_vision = n_vision

    def prefill_retain(self, vision_scores) -> np.ndarray | None:
        return None

    def after_prefill_layer(self, layer: int, cache: LayerKvCache, scores: np.ndarray) -> None:
        pass

    def used_rows(self, layer: int, cache: LayerKvCache, step: int) -> np.ndarray:
        return np.arange(len(cache))

    def after_decode_layer(self, layer, cache, used, scores, step) -> None:
        pass

    def to_dict(self) -> dict:
        return {"policy": self.name}


class FullPolicy(CachePolicy):
    """No eviction, every slot attended."""


class AvlPolicy(CachePolicy):
    name = "avl"

    def __init__(self, config: AvlPolicyConfig | None = None):
        self.config = config or AvlPolicyConfig()

    def reset(self, max_text_tokens: int, n_vision: int) -> None:
        self.n_vision = n_vision
        self.text = TextWindowState.from_percent(self.config.text_window_pct, max_text_tokens)

    def prefill_retain(self, vision_scores):
        if self.config.prefill_keep_pct >= 100:
            return None
        return prefill_prune(vision_scores, self.config.prefill_keep_pct)

    def after_prefill_layer(self, layer, cache, scores):
        vis = cache.rows_of(Segment.VISION)
        doomed = []
        if vis.size:
            cls = classify_vision(scores[vis], self.config, self.n_vision)
            cache.set_core(vis[cls.core])
            doomed.append(vis[cls.minor])
        text = cache.rows_of(*TEXT_SEGMENTS)
        cache.add_scores(text, scores[text])
        doomed.append(text_step(cache, self.text))
        cache.evict(np.sort(np.concatenate(doomed)))

    def used_rows(self, layer, cache, step):
        kind = "update" if is_update_step(step, self.config.update_every) else "normal"
        return used_set(cache, kind)

    def after_decode_layer(self, layer, cache, used, scores, step):
        segs = cache.segments[used]
        is_text = np.isin(segs, [int(s) for s in TEXT_SEGMENTS])
        cache.add_scores(used[is_text], scores[is_text])
        if is_update_step(step, self.config.update_every):
            is_vis = segs == Segment.VISION
            vis_rows = used[is_vis]
            if vis_rows.size:
                new_core = update_core(scores[is_vis], self.config, n_vision=self.n_vision, step=step)
                cache.set_core(vis_rows[new_core])
        cache.evict(text_step(cache, self.text))

    def to_dict(self):
        c = self.config
        return {"policy": self.name, "S": c.secondary_pct, "C": c.core_pct, "K": c.update_every,
                "P": c.prefill_keep_pct, "T": c.text_window_pct}


class _WindowPolicy(CachePolicy):
    """Shared plumbing for policies that bound the non-system slots of each layer."""

    def after_prefill_layer(self, layer, cache, scores):
        self.observe(cache, np.arange(len(cache)), scores)
        self.enforce(cache)

    def after_decode_layer(self, layer, cache, used, scores, step):
        self.observe(cache, used, scores)
        self.enforce(cache)

    def observe(self, cache, rows, scores) -> None:
        pass

    def enforce(self, cache: LayerKvCache) -> int:
        rows = np.flatnonzero(cache.segments != Segment.SYSTEM)
        return cache.evict(rows[self.evictions(cache, rows)])

    def evictions(self, cache, rows) -> np.ndarray:
        raise NotImplementedError


class H2OPolicy(_WindowPolicy):
    """Heavy-hitter window: the newest ``recent_pct`` of the window plus the
    highest accumulated-attention slots among the rest."""

    name = "h2o"

    def __init__(self, window: int = 64, recent_pct: float = 75.0):
        if window < 1:
            raise ConfigError(f"h2o window must be >= 1, got {window}")
        if not 0 <= recent_pct <= 100:
            raise ConfigError(f"h2o recent share must be in [0, 100], got {recent_pct}")
        self.window = int(window)
        self.n_recent = percent_count(recent_pct, self.window)
        self.n_heavy = self.window - self.n_recent

    def observe(self, cache, rows, scores):
        rows = np.asarray(rows)
        keep = cache.segments[rows] != Segment.SYSTEM
        cache.add_scores(rows[keep], np.asarray(scores)[keep])

    def evictions(self, cache, rows):
        n = rows.size
        if n <= self.window:
            return np.zeros(0, dtype=np.int64)
        older = n - self.n_recent
        heavy = top_set(cache.scores[rows[:older]], self.n_heavy)
        doomed = np.ones(older, dtype=bool)
        doomed[heavy] = False
        return np.flatnonzero(doomed)

    def to_dict(self):
        return {"policy": self.name, "h2o_window": self.window}


class StreamingPolicy(_WindowPolicy):
    """Attention sinks plus a recent window; everything in between is dropped."""

    name = "streaming"

    def __init__(self, sink: int = 4, recent: int = 64):
        if sink < 0 or recent < 1:
            raise ConfigError(f"streaming needs sink >= 0 and recent >= 1, got {sink}, {recent}")
        self.sink = int(sink)
        self.recent = int(recent)

    def evictions(self, cache, rows):
        n = rows.size
        if n <= self.sink + self.recent:
            return np.zeros(0, dtype=np.int64)
        return np.arange(self.sink, n - self.recent)

    def to_dict(self):
        return {"policy": self.name, "sink": self.sink, "recent": self.recent}


class FastVPolicy(CachePolicy):
    """Prune vision tokens once after layer 2 in prefill; no decode-time eviction."""

    name = "fastv"

    def __init__(self, keep_pct: float = 50.0):
        if not 0 < keep_pct <= 100:
            raise ConfigError(f"fastv keep must be in (0, 100], got {keep_pct}")
        self.keep_pct = keep_pct

    def prefill_retain(self, vision_scores):
        return prefill_prune(vision_scores, self.keep_pct)

    def to_dict(self):
        return {"policy": self.name, "fastv_keep": self.keep_pct}


# --------------------------------------------------------------------------- JSON configuration

POLICY_FIELDS = {"policy", "S", "C", "K", "P", "T", "h2o_window", "sink", "recent", "fastv_keep"}
_PER_POLICY = {
    "full": set(),
    "avl": {"S", "C", "K", "P", "T"},
    "h2o": {"h2o_window"},
    "streaming": {"sink", "recent"},
    "fastv": {"fastv_keep"},
}


def policy_from_dict(obj: dict) -> CachePolicy:
    """Build a policy from ``{"policy": name, ...}``; unknown fields are rejected.

    Parameters belonging to other policies are accepted and ignored so that a
    single settings object can be shared across a comparison.
    """
    if not isinstance(obj, dict):
        raise ConfigError("policy config must be a JSON object")
    unknown = set(obj) - POLICY_FIELDS
    if unknown:
        raise ConfigError(f"unknown policy fields: {sorted(unknown)}")
    name = obj.get("policy")
    if name not in _PER_POLICY:
        raise ConfigError(f"unknown policy {name!r}; expected one of {sorted(_PER_POLICY)}")
    try:
        if name == "avl":
            d = AvlPolicyConfig()
            return AvlPolicy(AvlPolicyConfig(
                secondary_pct=float(obj.get("S", d.secondary_pct)),
                core_pct=float(obj.get("C", d.core_pct)),
                update_every=int(obj.get("K", d.update_every)),
                prefill_keep_pct=float(obj.get("P", d.prefill_keep_pct)),
                text_window_pct=float(obj.get("T", d.text_window_pct)),
            ))
        if name == "h2o":
            return H2OPolicy(int(obj.get("h2o_window", 64)))
        if name == "streaming":
            return StreamingPolicy(int(obj.get("sink", 4)), int(obj.get("recent", 64)))
        if name == "fastv":
            return FastVPolicy(float(obj.get("fastv_keep", 50.0)))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad value in policy config: {exc}") from exc
    return FullPolicy()


def policy_from_json(text: str) -> CachePolicy:
    return policy_from_dict(json.loads(text))
