"""Per-layer segmented KV store and the stored/used cache accounting."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ShapeError, SlotIndexError
from .metrics import FlopCounter
from .segments import TEXT_SEGMENTS, Segment
from ._csv import fmt_float, write_csv
from .tensor import index_set


@dataclass(frozen=True)
class SlotMeta:
    original_position: int
    segment: Segment
    is_core: bool = False
    accumulated_score: float = 0.0

    def __post_init__(self):
        if self.is_core and self.segment != Segment.VISION:
            raise ValueError("only vision slots can be core")
        if self.accumulated_score < 0:
            raise ValueError("accumulated score must be non-negative")


class LayerKvCache:
    """Keys, values and slot metadata for one decoder layer.

    Rows are kept compact: :meth:`evict` physically removes rows, so
    ``len(cache)`` is the stored slot count.  Metadata lives in parallel arrays
    (``positions``, ``segments``, ``is_core``, ``scores``); :attr:`meta`
    materialises it as :class:`SlotMeta` records.
    """

    def __init__(self, d_model: int, capacity: int = 64):
        self.d_model = d_model
        capacity = max(int(capacity), 1)
        self._keys = np.zeros((capacity, d_model), dtype=np.float32)
        self._values = np.zeros((capacity, d_model), dtype=np.float32)
        self._positions = np.zeros(capacity, dtype=np.int64)
        self._segments = np.zeros(capacity, dtype=np.int8)
        self._core = np.zeros(capacity, dtype=bool)
        self._scores = np.zeros(capacity, dtype=np.float64)
        self._n = 0
        self.evicted_total = 0

    def __len__(self) -> int:
        return self._n

    @property
    def keys(self) -> np.ndarray:
        return self._keys[:self._n]

    @property
    def values(self) -> np.ndarray:
        return self._values[:self._n]

    @property
    def positions(self) -> np.ndarray:
        return self._positions[:self._n]

    @property
    def segments(self) -> np.ndarray:
        return self._segments[:self._n]

    @property
    def is_core(self) -> np.ndarray:
        return self._core[:self._n]

    @property
    def scores(self) -> np.ndarray:
        """Accumulated attention score per slot (text slots under A-VL)."""
        return self._scores[:self._n]

    @property
    def meta(self) -> list[SlotMeta]:
        return [
            SlotMeta(int(p), Segment(int(s)), bool(c), float(a))
            for p, s, c, a in zip(self.positions, self.segments, self.is_core, self.scores)
        ]

    def _grow(self, need: int) -> None:
        cap = self._keys.shape[0]
        if need <= cap:
            return
        new_cap = max(need, 2 * cap)
        for name in ("_keys", "_values"):
            old = getattr(self, name)
            buf = np.zeros((new_cap, self.d_model), dtype=np.float32)
            buf[:self._n] = old[:self._n]
            setattr(self, name, buf)
        for name in ("_positions", "_segments", "_core", "_scores"):
            old = getattr(self, name)
            buf = np.zeros(new_cap, dtype=old.dtype)
            buf[:self._n] = old[:self._n]
            setattr(self, name, buf)

    def append(self, key_vec, value_vec, meta: SlotMeta) -> None:
        self.extend(np.reshape(key_vec, (1, -1)), np.reshape(value_vec, (1, -1)),
                    [meta.original_position], [meta.segment],
                    is_core=[meta.is_core], scores=[meta.accumulated_score])

    def extend(self, keys, values, positions, segments, *, is_core=None, scores=None) -> None:
        """Append several slots at once, in order."""
        keys = np.asarray(keys, dtype=np.float32)
        values = np.asarray(values, dtype=np.float32)
        positions = np.asarray(positions, dtype=np.int64).reshape(-1)
        count = positions.size
        if keys.shape != (count, self.d_model) or values.shape != (count, self.d_model):
            raise ShapeError(
                f"expected {count} key/value rows of width {self.d_model}, "
                f"got {keys.shape} / {values.shape}")
        if count == 0:
            return
        last = self._positions[self._n - 1] if self._n else -1
        if positions[0] <= last or (count > 1 and np.any(np.diff(positions) <= 0)):
            raise ShapeError("original positions must be strictly increasing")
        segs = np.asarray([int(s) for s in segments], dtype=np.int8)
        core = np.zeros(count, bool) if is_core is None else np.asarray(is_core, dtype=bool)
        if np.any(core & (segs != Segment.VISION)):
            raise ValueError("only vision slots can be core")
        sc = np.zeros(count) if scores is None else np.asarray(scores, dtype=np.float64)
        self._grow(self._n + count)
        sl = slice(self._n, self._n + count)
        self._keys[sl] = keys
        self._values[sl] = values
        self._positions[sl] = positions
        self._segments[sl] = segs
        self._core[sl] = core
        self._scores[sl] = sc
        self._n += count

    def evict(self, slot_rows) -> int:
        """Remove the given rows, preserving the order of the rest; returns the count removed."""
        rows = index_set(slot_rows, self._n)
        if rows.size == 0:
            return 0
        keep = np.ones(self._n, dtype=bool)
        keep[rows] = False
        kept = np.flatnonzero(keep)
        m = kept.size
        for arr in (self._keys, self._values, self._positions, self._segments, self._core, self._scores):
            arr[:m] = arr[kept]
        self._n = m
        self.evicted_total += rows.size
        return int(rows.size)

    def rows_of(self, *segments: Segment) -> np.ndarray:
        codes = [int(s) for s in segments]
        return np.flatnonzero(np.isin(self.segments, codes))

    def set_core(self, rows) -> None:
        """Mark exactly ``rows`` (which must be vision slots) as core."""
        rows = index_set(rows, self._n)
        if np.any(self.segments[rows] != Segment.VISION):
            raise SlotIndexError("core slots must be vision slots")
        self._core[:self._n] = False
        self._core[rows] = True

    def add_scores(self, rows, amounts) -> None:
        rows = index_set(rows, self._n)
        self._scores[rows] += np.asarray(amounts, dtype=np.float64)

    def segment_counts(self, rows=None) -> dict[Segment, int]:
        segs = self.segments if rows is None else self.segments[np.asarray(rows, dtype=np.int64)]
        counts = np.bincount(segs.astype(np.int64), minlength=len(Segment))
        return {s: int(counts[s]) for s in Segment}


def used_set(cache: LayerKvCache, step_kind: str = "normal") -> np.ndarray:
    """Rows participating in attention under the A-VL selection rule.

    ``normal``: system + core vision + live text.  ``update``: system + every
    stored vision slot + live text.  Ascending row order.
    """
    segs = cache.segments
    if step_kind == "normal":
        mask = (segs != Segment.VISION) | cache.is_core
    elif step_kind == "update":
        mask = np.ones(len(cache), dtype=bool)
    else:
        raise ValueError(f"step_kind must be 'normal' or 'update', got {step_kind!r}")
    return np.flatnonzero(mask)


# --------------------------------------------------------------------------- accounting


@dataclass(frozen=True)
class StepRecord:
    layer: int
    step: int
    stored: tuple[int, int, int, int]
    used: tuple[int, int, int, int]
    full_slots: int
    attn_flops: int
    full_attn_flops: int

    @property
    def stored_slots(self) -> int:
        return sum(self.stored)

    @property
    def used_slots(self) -> int:
        return sum(self.used)


@dataclass
class StatsRecorder:
    """Exact integer counters for one generation session."""

    d_model: int
    n_heads: int
    records: list[StepRecord] = field(default_factory=list)

    def __post_init__(self):
        self.flops = FlopCounter(self.d_model, self.n_heads)

    def record(self, layer: int, step: int, cache: LayerKvCache, used_rows, full_slots: int) -> StepRecord:
        stored = cache.segment_counts()
        used = cache.segment_counts(used_rows)
        f = self.flops.record(layer, step, sum(used.values()), full_slots)
        rec = StepRecord(
            layer=layer,
            step=step,
            stored=tuple(stored[s] for s in Segment),
            used=tuple(used[s] for s in Segment),
            full_slots=full_slots,
            attn_flops=f.total,
            full_attn_flops=f.full_total,
        )
        self.records.append(rec)
        return rec


@dataclass(frozen=True)
class CacheStats:
    stored_slots: int
    used_slots: int
    full_slots: int
    attn_flops: int
    full_attn_flops: int
    stored_by_segment: dict
    used_by_segment: dict
    n_steps: int

    @property
    def stored_fraction(self) -> Fraction:
        return Fraction(self.stored_slots, self.full_slots)

    @property
    def used_fraction(self) -> Fraction:
        return Fraction(self.used_slots, self.full_slots)

    @property
    def attention_flops_ratio(self) -> Fraction:
        return Fraction(self.attn_flops, self.full_attn_flops)


def collect_stats(records) -> CacheStats:
    """Sum per-(layer, step) records into session fractions.

    Fractions are ratios of sums over every layer and decode step, with the
    full-cache counterfactual (every prompt and generated slot) as denominator.
    """
    records = list(records.records if isinstance(records, StatsRecorder) else records)
    if not records:
        raise ValueError("no decode steps recorded")
    stored = [sum(r.stored[s] for r in records) for s in Segment]
    used = [sum(r.used[s] for r in records) for s in Segment]
    return CacheStats(
        stored_slots=sum(stored),
        used_slots=sum(used),
        full_slots=sum(r.full_slots for r in records),
        attn_flops=sum(r.attn_flops for r in records),
        full_attn_flops=sum(r.full_attn_flops for r in records),
        stored_by_segment={s: stored[s] for s in Segment},
        used_by_segment={s: used[s] for s in Segment},
        n_steps=len({r.step for r in records}),
    )


STATS_HEADER = [
    "policy", "layer", "step", "stored_slots", "used_slots", "full_slots",
    *[f"stored_{s.label}" for s in Segment], *[f"used_{s.label}" for s in Segment],
    "attn_flops", "full_attn_flops", "stored_fraction", "used_fraction",
]


def stats_rows(policy: str, records) -> list[list[str]]:
    """One row per (layer, step) plus a trailing ``all, all`` summary row."""
    records = list(records.records if isinstance(records, StatsRecorder) else records)
    rows = []
    for r in records:
        rows.append([policy, str(r.layer), str(r.step), str(r.stored_slots), str(r.used_slots),
                     str(r.full_slots), *map(str, r.stored), *map(str, r.used),
                     str(r.attn_flops), str(r.full_attn_flops),
                     fmt_float(Fraction(r.stored_slots, r.full_slots)),
                     fmt_float(Fraction(r.used_slots, r.full_slots))])
    s = collect_stats(records)
    rows.append([policy, "all", "all", str(s.stored_slots), str(s.used_slots), str(s.full_slots),
                 *(str(s.stored_by_segment[g]) for g in Segment),
                 *(str(s.used_by_segment[g]) for g in Segment),
                 str(s.attn_flops), str(s.full_attn_flops),
                 fmt_float(s.stored_fraction), fmt_float(s.used_fraction)])
    return rows


def write_stats_csv(path, policy: str, records):
    return write_csv(path, STATS_HEADER, stats_rows(policy, records))


def records_from_csv(rows) -> list[StepRecord]:
    """Rebuild step records from stats CSV rows (the summary row is skipped)."""
    out = []
    ns = len(Segment)
    for row in rows:
        if row[1] == "all":
            continue
        nums = [int(v) for v in row[3:3 + 3 + 2 * ns + 2]]
        out.append(StepRecord(
            layer=int(row[1]), step=int(row[2]),
            stored=tuple(nums[3:3 + ns]), used=tuple(nums[3 + ns:3 + 2 * ns]),
            full_slots=nums[2], attn_flops=nums[3 + 2 * ns], full_attn_flops=nums[4 + 2 * ns]))
    return out
