"""Latency of full matmul vs gather-then-matmul vs the indexed kernel.

Each cell multiplies ``batch`` query rows against a ``d x d`` key matrix,
selecting ``ratio`` of its rows.  The three variants are checked for
numerical agreement before anything is timed.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ._csv import fmt_float, write_csv
from .errors import AvlError
from .ranking import clamp, percent_count, top_set
from .tensor import DEFAULT_BLOCK, Rng64, indexed_gemm_rows, rng_uniform, rng_uniform_matrix

AGREEMENT_RTOL = 1e-6


class AgreementError(AvlError):
    pass


def relative_error(x: np.ndarray, ref: np.ndarray) -> float:
    """Frobenius-norm relative error of ``x`` against ``ref``."""
    x64 = np.asarray(x, dtype=np.float64)
    r64 = np.asarray(ref, dtype=np.float64)
    denom = np.linalg.norm(r64)
    diff = np.linalg.norm(x64 - r64)
    return float(diff / denom) if denom else float(diff)


def median_latency(fn, iters: int = 100, warmup: int = 10) -> float:
    """Median wall time of ``fn()`` in seconds, on the monotonic perf counter."""
    for _ in range(warmup):
        fn()
    times = np.empty(iters)
    for i in range(iters):
        t0 = time.perf_counter()
        fn()
        times[i] = time.perf_counter() - t0
    return float(np.median(times))


@dataclass(frozen=True)
class BenchRow:
    d: int
    ratio: float
    batch: int
    n_selected: int
    full_s: float
    slice_s: float
    indexed_s: float
    slice_rel_err: float
    full_rel_err: float | None


def bench_inputs(d: int, ratio: float, batch: int, seed: int):
    rng = Rng64(seed)
    keys, rng = rng_uniform_matrix(rng, (d, d), -1.0, 1.0)
    queries, rng = rng_uniform_matrix(rng, (batch, d), -1.0, 1.0)
    pick, _ = rng_uniform(rng, d, 0.0, 1.0)
    n_sel = clamp(percent_count(ratio * 100, d), 1, d)
    return queries, keys, top_set(pick, n_sel)


def bench_cell(d: int, ratio: float, batch: int, *, iters: int = 100, warmup: int = 10,
               seed: int = 0, block: int = DEFAULT_BLOCK) -> BenchRow:
    if iters < 100 or warmup < 10:
        raise ValueError("need at least 100 timed and 10 warmup iterations")
    a, b, idx = bench_inputs(d, ratio, batch, seed)

    def full():
        return a @ b.T

    def sliced():
        return a @ b[idx].T

    def indexed():
        return indexed_gemm_rows(a, b, idx, block=block, fast=True)

    got, ref = indexed(), sliced()
    err = relative_error(got, ref)
    if not err <= AGREEMENT_RTOL:
        raise AgreementError(
            f"indexed vs slice disagree at d={d} ratio={ratio} batch={batch}: relative error {err:.3e}")
    full_err = None
    if idx.size == d:
        full_err = relative_error(got, full())
        if not full_err <= AGREEMENT_RTOL:
            raise AgreementError(f"indexed vs full disagree at d={d} batch={batch}: relative error {full_err:.3e}")
    return BenchRow(d, ratio, batch, int(idx.size),
                    median_latency(full, iters, warmup),
                    median_latency(sliced, iters, warmup),
                    median_latency(indexed, iters, warmup),
                    err, full_err)


def run_bench(dims, ratios, batches, **kw) -> list[BenchRow]:
    return [bench_cell(d, r, bs, **kw) for d in dims for r in ratios for bs in batches]


BENCH_HEADER = ["d", "ratio", "batch", "n_selected", "full_ms", "slice_ms", "indexed_ms",
                "slice_rel_err", "full_rel_err"]


def bench_rows(rows: list[BenchRow]) -> list[list[str]]:
    return [[str(r.d), fmt_float(r.ratio), str(r.batch), str(r.n_selected),
             f"{r.full_s * 1e3:.4f}", f"{r.slice_s * 1e3:.4f}", f"{r.indexed_s * 1e3:.4f}",
             f"{r.slice_rel_err:.3e}", "" if r.full_rel_err is None else f"{r.full_rel_err:.3e}"]
            for r in rows]


def write_bench_csv(path, rows: list[BenchRow]):
    return write_csv(path, BENCH_HEADER, bench_rows(rows))
