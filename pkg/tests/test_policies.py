import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from avlkv.cache import LayerKvCache, SlotMeta
from avlkv.errors import ConfigError, PolicyError, StateError
from avlkv.policies import (AvlPolicy, AvlPolicyConfig, FastVPolicy, FullPolicy, H2OPolicy,
                            StreamingPolicy, TextWindowState, classify_vision, is_update_step,
                            policy_from_dict, prefill_prune, text_evictions, text_step, update_core)
from avlkv.segments import Segment

SCORES_10 = [0.30, 0.01, 0.20, 0.02, 0.15, 0.03, 0.10, 0.04, 0.08, 0.06]


def cfg(S=50, C=30, K=3, P=100, T=100):
    return AvlPolicyConfig(S, C, K, P, T)


def sort_oracle(scores, m):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(order[:m])


def test_classify_example():
    c = classify_vision(SCORES_10, cfg())
    assert c.core.tolist() == [0, 2, 4] == sort_oracle(SCORES_10, 3)
    assert c.secondary.tolist() == [0, 2, 4, 6, 8] == sort_oracle(SCORES_10, 5)
    assert c.minor.tolist() == [1, 3, 5, 7, 9]


def test_classify_equal_s_and_c():
    c = classify_vision(SCORES_10, cfg(S=40, C=40))
    assert np.array_equal(c.core, c.secondary)


def test_classify_ties_prefer_low_ordinals():
    c = classify_vision([0.1] * 10, cfg())
    assert c.secondary.tolist() == [0, 1, 2, 3, 4]
    assert c.core.tolist() == [0, 1, 2]


def test_classify_empty():
    with pytest.raises(PolicyError):
        classify_vision([], cfg())


def test_classify_secondary_capped_by_candidates():
    # 40% of 100 original tokens, but only 30 survived prefill pruning
    c = classify_vision(np.linspace(1, 0, 30), cfg(S=40, C=30), n_vision=100)
    assert c.secondary.size == 30 and c.core.size == 30 and c.minor.size == 0


def test_config_validation():
    for bad in [dict(S=20, C=30), dict(C=0), dict(K=0), dict(P=0), dict(T=120), dict(S=101, C=50)]:
        with pytest.raises(ConfigError):
            cfg(**bad)


def test_prefill_prune_examples():
    assert prefill_prune([0.3, 0.2, 0.5], 100).tolist() == [0, 1, 2]
    assert prefill_prune(np.arange(8, 0, -1) / 36, 50).tolist() == [0, 1, 2, 3]
    assert prefill_prune([0.2, 0.7, 0.1], 1).tolist() == [1]


def test_is_update_step():
    assert all(is_update_step(t, 1) for t in range(1, 10))
    assert [t for t in range(1, 10) if is_update_step(t, 3)] == [3, 6, 9]
    assert is_update_step(5, 5)
    with pytest.raises(ValueError):
        is_update_step(0, 3)


def test_update_core_favours_new_scores():
    secondary = np.array([0, 2, 4, 6, 8])
    scores = [0.01, 0.02, 0.2, 0.4, 0.3]
    new = update_core(scores, cfg(), n_vision=10, step=3)
    assert secondary[new].tolist() == [4, 6, 8]


def test_update_core_fixed_point():
    first = classify_vision(SCORES_10, cfg())
    sec_scores = np.asarray(SCORES_10)[first.secondary]
    new = update_core(sec_scores, cfg(), n_vision=10, step=6)
    assert np.array_equal(first.secondary[new], first.core)


def test_update_core_single_secondary():
    assert update_core([0.5], cfg(), n_vision=10, step=3).tolist() == [0]


def test_update_core_rejects_normal_step():
    with pytest.raises(StateError):
        update_core([0.1, 0.2], cfg(), n_vision=10, step=4)


def test_text_eviction_examples():
    assert text_evictions([1, 2, 3], 6).size == 0
    assert text_evictions([5, 1, 3, 9, 2, 8, 7], 6).tolist() == [1]
    assert text_evictions([2, 2, 2, 0.1, 0.1, 0.1, 0.1], 6).tolist() == [0]


def test_text_window_minimum():
    with pytest.raises(ConfigError):
        TextWindowState(1)
    assert TextWindowState.from_percent(70, 30).window == 21


def test_text_step_on_cache():
    cache = LayerKvCache(2)
    cache.append(np.zeros(2), np.zeros(2), SlotMeta(0, Segment.SYSTEM))
    for i, s in enumerate([5, 1, 3, 9, 2, 8, 7]):
        cache.append(np.zeros(2), np.zeros(2), SlotMeta(i + 1, Segment.GENERATED, accumulated_score=s))
    rows = text_step(cache, TextWindowState(6))
    assert cache.positions[rows].tolist() == [2]


@given(st.integers(2, 12), st.lists(st.floats(0, 10), min_size=1, max_size=40))
def test_text_window_never_touches_recent_half(window, increments):
    acc = []
    for x in increments:
        acc.append(0.0)
        acc = [a + x for a in acc]
        doomed = text_evictions(acc, window)
        assert np.all(doomed < len(acc) - math.ceil(window / 2))
        acc = [a for i, a in enumerate(acc) if i not in set(doomed.tolist())]
        assert len(acc) <= window


@given(st.lists(st.floats(0.001, 1), min_size=1, max_size=50), st.floats(0.1, 100),
       st.integers(1, 100), st.integers(1, 100))
def test_classification_invariants(scores, factor, s_pct, c_pct):
    s_pct, c_pct = max(s_pct, c_pct), min(s_pct, c_pct)
    config = cfg(S=s_pct, C=c_pct)
    c = classify_vision(scores, config)
    assert set(c.core) <= set(c.secondary)
    assert not set(c.secondary) & set(c.minor)
    assert sorted(set(c.secondary) | set(c.minor)) == list(range(len(scores)))
    scaled = classify_vision(np.asarray(scores) * factor, config)
    # rescaling can only matter through float rounding of exact ties
    if len(set(scores)) == len(scores):
        assert np.array_equal(c.core, scaled.core) and np.array_equal(c.secondary, scaled.secondary)


def _appender(policy, n, rng=None, system=0):
    cache = LayerKvCache(2)
    for pos in range(n):
        seg = Segment.SYSTEM if pos < system else Segment.GENERATED
        cache.append(np.zeros(2), np.zeros(2), SlotMeta(pos, seg))
        row = np.array([len(cache) - 1])
        score = np.array([rng.random() if rng is not None else 0.0])
        policy.observe(cache, row, score)
        policy.enforce(cache)
    return cache


def test_streaming_keeps_sinks_and_recent():
    cache = _appender(StreamingPolicy(sink=4, recent=16), 40)
    assert len(cache) == 20
    assert cache.positions.tolist() == [0, 1, 2, 3] + list(range(24, 40))


def test_h2o_window_with_recent_block():
    policy = H2OPolicy(window=20)
    assert (policy.n_recent, policy.n_heavy) == (15, 5)
    cache = _appender(policy, 30, np.random.default_rng(0))
    assert len(cache) == 20
    assert set(range(15, 30)) <= set(cache.positions.tolist())


def test_window_policies_spare_system_slots():
    cache = _appender(StreamingPolicy(sink=1, recent=2), 12, system=5)
    assert cache.positions.tolist()[:5] == [0, 1, 2, 3, 4]


def test_policy_json():
    p = policy_from_dict({"policy": "avl", "S": 40, "C": 30, "K": 3, "P": 100, "T": 100})
    assert isinstance(p, AvlPolicy) and p.config == AvlPolicyConfig(40, 30, 3, 100, 100)
    assert isinstance(policy_from_dict({"policy": "full"}), FullPolicy)
    assert policy_from_dict({"policy": "fastv"}).keep_pct == 50
    assert policy_from_dict({"policy": "h2o", "h2o_window": 8}).window == 8
    s = policy_from_dict({"policy": "streaming", "sink": 2, "recent": 6})
    assert (s.sink, s.recent) == (2, 6)
    with pytest.raises(ConfigError):
        policy_from_dict({"policy": "avl", "window": 3})
    with pytest.raises(ConfigError):
        policy_from_dict({"policy": "lru"})
    with pytest.raises(ConfigError):
        policy_from_dict({"policy": "avl", "S": 10, "C": 20})


def test_fastv_keep_ratio():
    assert FastVPolicy(50).prefill_retain(np.arange(7.0)).tolist() == [3, 4, 5, 6]
