"""Attention-pattern analysis: head-averaged scores, PPCI, segment shares, traces, FLOPs."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ._csv import fmt_float, read_csv, write_csv
from .errors import ShapeError, TraceError
from .ranking import clamp, percent_count, top_set
from .segments import Segment


def attention_score(per_head_weights: Sequence) -> np.ndarray:
    """Mean over heads of one query's attention weights (float32)."""
    heads = [np.asarray(h, dtype=np.float32).reshape(-1) for h in per_head_weights]
    if not heads:
        raise ShapeError("attention_score needs at least one head")
    n = heads[0].size
    if any(h.size != n for h in heads):
        raise ShapeError(f"ragged head vectors: {[h.size for h in heads]}")
    total = np.zeros(n, dtype=np.float32)
    for h in heads:
        total += h
    return total / np.float32(len(heads))


def top_count(p_pct: float, n: int) -> int:
    return clamp(percent_count(p_pct, n), 1, n)


def ppci(s1, s2, p_pct: float) -> float:
    """Share of the top-``p_pct`` percent tokens common to two score vectors.

    The top-set size is ``m = clamp(round(p/100 * N), 1, N)`` and ties go to the
    lower index, so the result is always a multiple of ``1/m``.
    """
    a = np.asarray(s1, dtype=np.float64).reshape(-1)
    b = np.asarray(s2, dtype=np.float64).reshape(-1)
    if a.size != b.size or a.size == 0:
        raise ShapeError(f"ppci needs two non-empty vectors of equal length, got {a.size} and {b.size}")
    if not 0 < p_pct <= 100:
        raise ValueError(f"percentile must be in (0, 100], got {p_pct}")
    m = top_count(p_pct, a.size)
    common = np.intersect1d(top_set(a, m), top_set(b, m), assume_unique=True).size
    return common / m


def segment_shares(scores, segments) -> dict[Segment, float]:
    """Sum of scores per segment; every slot must carry a segment tag."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    segments = list(segments)
    if len(segments) != s.size:
        raise TraceError(f"{s.size} scores but {len(segments)} segment tags")
    codes = np.empty(s.size, dtype=np.int64)
    for i, g in enumerate(segments):
        try:
            codes[i] = int(Segment.parse(g) if isinstance(g, str) else Segment(int(g)))
        except (TypeError, ValueError):
            raise TraceError(f"slot {i} has no valid segment (got {g!r})") from None
    sums = np.bincount(codes, weights=s, minlength=len(Segment))
    return {g: float(sums[g]) for g in Segment}


# --------------------------------------------------------------------------- traces


@dataclass
class TraceEntry:
    layer: int
    step: int
    positions: np.ndarray
    segments: np.ndarray
    scores: np.ndarray

    def shares(self) -> dict[Segment, float]:
        return segment_shares(self.scores, self.segments)


TRACE_HEADER = ["layer", "step", "slot_position", "segment", "score"]
TRUNCATED = "TRUNCATED"


@dataclass
class AttentionTrace:
    """Head-averaged scores of the newest query, keyed by (layer, step).

    Step 0 is the final prompt position in prefill; decode steps count from 1.
    """

    entries: dict[tuple[int, int], TraceEntry] = field(default_factory=dict)
    truncated: bool = False

    def add(self, layer: int, step: int, positions, segments, scores) -> None:
        self.entries[(layer, step)] = TraceEntry(
            layer, step,
            np.array(positions, dtype=np.int64),
            np.array(segments, dtype=np.int8),
            np.array(scores, dtype=np.float32),
        )

    def __getitem__(self, key) -> TraceEntry:
        return self.entries[key]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def layers(self) -> list[int]:
        return sorted({k[0] for k in self.entries})

    @property
    def steps(self) -> list[int]:
        return sorted({k[1] for k in self.entries})

    def rows(self) -> Iterable[list[str]]:
        for key in sorted(self.entries):
            e = self.entries[key]
            for p, g, s in zip(e.positions, e.segments, e.scores):
                yield [str(e.layer), str(e.step), str(int(p)), Segment(int(g)).label, fmt_float(s)]

    def to_csv(self, path, max_rows: int | None = None):
        rows = list(self.rows())
        if max_rows is not None and len(rows) > max_rows:
            dropped = len(rows) - max_rows
            rows = rows[:max_rows] + [[TRUNCATED, str(dropped), "", "", ""]]
        return write_csv(path, TRACE_HEADER, rows)

    @classmethod
    def from_csv(cls, path) -> "AttentionTrace":
        try:
            header, rows = read_csv(path)
        except ValueError as exc:
            raise TraceError(str(exc)) from None
        if header != TRACE_HEADER:
            raise TraceError(f"{path}: expected header {','.join(TRACE_HEADER)}, got {','.join(header)}")
        grouped: dict[tuple[int, int], list] = {}
        trace = cls()
        for lineno, row in enumerate(rows, start=2):
            if row and row[0] == TRUNCATED:
                trace.truncated = True
                break
            try:
                layer, step, pos, seg, score = row
                key = (int(layer), int(step))
                item = (int(pos), int(Segment.parse(seg)), float(score))
            except ValueError:
                raise TraceError(f"{path}: malformed trace row at line {lineno}: {row!r}") from None
            grouped.setdefault(key, []).append(item)
        for (layer, step), items in grouped.items():
            pos, seg, sc = zip(*items)
            trace.add(layer, step, pos, seg, sc)
        return trace


@dataclass(frozen=True)
class PpciCell:
    layer: int
    step: int
    anchor_layer: int
    anchor_step: int
    ppci: float
    n_common: int
    restricted: bool


def _restrict(a: TraceEntry, b: TraceEntry, segment: Segment | None):
    def pick(e):
        keep = np.ones(e.positions.size, bool) if segment is None else e.segments == int(segment)
        return e.positions[keep], e.scores[keep]

    pa, sa = pick(a)
    pb, sb = pick(b)
    common, ia, ib = np.intersect1d(pa, pb, assume_unique=True, return_indices=True)
    restricted = common.size < pa.size or common.size < pb.size
    return sa[ia], sb[ib], restricted


def compare_entries(anchor: TraceEntry, other: TraceEntry, p_pct: float,
                    segment: Segment | None = None) -> PpciCell:
    """PPCI of two entries over the slots both attended (flagged when that drops slots)."""
    sa, sb, restricted = _restrict(anchor, other, segment)
    value = ppci(sa, sb, p_pct) if sa.size else float("nan")
    return PpciCell(other.layer, other.step, anchor.layer, anchor.step, value, int(sa.size), restricted)


def ppci_matrix(trace: AttentionTrace, anchor: str, p_pct: float, *, step: int = 0,
                anchor_step: int = 1, segment: Segment | None = None) -> list[PpciCell]:
    """PPCI against an anchor entry, across layers or across steps.

    ``anchor="layer"``: first layer vs every layer at ``step`` (0 is prefill).
    ``anchor="step"``: per layer, step ``anchor_step`` vs every later step.
    """
    cells = []
    if anchor == "layer":
        layers = [l for l in trace.layers if (l, step) in trace.entries]
        if not layers:
            raise TraceError(f"trace has no entries at step {step}")
        base = trace[(layers[0], step)]
        for l in layers:
            cells.append(compare_entries(base, trace[(l, step)], p_pct, segment))
    elif anchor == "step":
        for l in trace.layers:
            steps = [t for t in trace.steps if t >= anchor_step and (l, t) in trace.entries]
            if not steps:
                continue
            base = trace[(l, steps[0])]
            for t in steps:
                cells.append(compare_entries(base, trace[(l, t)], p_pct, segment))
    else:
        raise ValueError(f"anchor must be 'layer' or 'step', got {anchor!r}")
    return cells


PPCI_HEADER = ["layer", "step", "anchor_layer", "anchor_step", "ppci", "n_common", "restricted"]


def ppci_rows(cells: Sequence[PpciCell]) -> list[list[str]]:
    return [[str(c.layer), str(c.step), str(c.anchor_layer), str(c.anchor_step),
             fmt_float(c.ppci), str(c.n_common), str(int(c.restricted))] for c in cells]


SEGMENT_HEADER = ["sample", "layer", "step", *[g.label for g in Segment]]


def segment_rows(trace: AttentionTrace, sample: str = "0") -> list[list[str]]:
    rows = []
    for key in sorted(trace.entries):
        sh = trace[key].shares()
        rows.append([sample, str(key[0]), str(key[1]), *(fmt_float(sh[g]) for g in Segment)])
    return rows


def mean_segment_rows(traces: Sequence[AttentionTrace]) -> list[list[str]]:
    """Per (layer, step) mean shares over the traces that contain that entry."""
    acc: dict[tuple[int, int], list[dict]] = {}
    for tr in traces:
        for key, e in tr.entries.items():
            acc.setdefault(key, []).append(e.shares())
    rows = []
    for key in sorted(acc):
        shares = acc[key]
        rows.append(["mean", str(key[0]), str(key[1]),
                     *(fmt_float(np.mean([s[g] for s in shares])) for g in Segment)])
    return rows


def write_ppci_csv(path, cells):
    return write_csv(path, PPCI_HEADER, ppci_rows(cells))


# --------------------------------------------------------------------------- FLOPs


def attention_flops(n_slots: int, d_model: int, n_heads: int) -> tuple[int, int, int]:
    """Integer FLOPs for one query over ``n_slots`` keys: (QK, softmax, PV).

    QK and PV cost one multiply and one add per element across all heads;
    softmax counts max, subtract, exp, sum and divide per score per head.
    """
    return 2 * n_slots * d_model, 5 * n_slots * n_heads, 2 * n_slots * d_model


@dataclass(frozen=True)
class FlopSample:
    layer: int
    step: int
    qk: int
    softmax: int
    pv: int
    full_qk: int
    full_softmax: int
    full_pv: int

    @property
    def total(self) -> int:
        return self.qk + self.softmax + self.pv

    @property
    def full_total(self) -> int:
        return self.full_qk + self.full_softmax + self.full_pv


@dataclass
class FlopCounter:
    """Attention FLOPs actually spent next to the full-cache counterfactual."""

    d_model: int
    n_heads: int
    samples: list[FlopSample] = field(default_factory=list)

    def record(self, layer: int, step: int, n_used: int, n_full: int) -> FlopSample:
        s = FlopSample(layer, step, *attention_flops(n_used, self.d_model, self.n_heads),
                       *attention_flops(n_full, self.d_model, self.n_heads))
        self.samples.append(s)
        return s

    def totals(self, step: int | None = None) -> tuple[int, int]:
        chosen = [s for s in self.samples if step is None or s.step == step]
        return sum(s.total for s in chosen), sum(s.full_total for s in chosen)
