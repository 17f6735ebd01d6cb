"""Percent-to-count rounding and deterministic top-set selection."""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def percent_count(pct: float, total: int) -> int:
    """``round_half_up(pct / 100 * total)`` evaluated exactly (no clamping)."""
    x = Fraction(pct).limit_denominator(10**9) * total / 100
    return math.floor(x + Fraction(1, 2))


def clamp(value: int, lo: int, hi: int) -> int:
    return max(lo, min(value, hi))


def rank_desc(scores) -> np.ndarray:
    """Indices ordered by score descending; equal scores keep ascending index order."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    return np.argsort(-s, kind="stable")


def top_set(scores, m: int) -> np.ndarray:
    """The ``m`` highest-scoring indices (ties to the lower index), ascending."""
    return np.sort(rank_desc(scores)[:m])
