"""Dense float32 linear algebra with slicing-free indexed GEMM, plus SplitMix64.

Every reference kernel accumulates each output element in ascending
contraction order, one rounded float32 multiply and one rounded float32 add
per term.  That makes results bit-reproducible and lets an indexed product
over the full index set match :func:`matmul` exactly.

The ``fast=True`` kernels are numba-compiled, register-tiled and allowed to
reassociate; they are used for benchmarking and agree with the reference
path to roughly float32 rounding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError, SlotIndexError

DEFAULT_BLOCK = 64

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def index_set(idx, n: int) -> np.ndarray:
    """Validate ``idx`` as a strictly ascending selection from ``range(n)``."""
    arr = np.asarray(idx, dtype=np.int64).reshape(-1)
    if arr.size:
        if arr[0] < 0 or arr[-1] >= n:
            raise SlotIndexError(f"index out of range for dimension {n}: {arr.min()}..{arr.max()}")
        if arr.size > 1 and not np.all(arr[1:] > arr[:-1]):
            raise SlotIndexError("index set must be strictly ascending without duplicates")
    return arr


def matmul(a, b) -> np.ndarray:
    """``a @ b`` with fixed ascending-k accumulation."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    m, k = a.shape
    if b.shape[0] != k:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.zeros((m, b.shape[1]), dtype=np.float32)
    for p in range(k):
        out += a[:, p, None] * b[p, None, :]
    return out


def indexed_gemm_cols(a, b, idx, *, block: int = DEFAULT_BLOCK, fast: bool = False) -> np.ndarray:
    """``a @ b[:, idx]`` computed by reading the selected columns of ``b`` in place.

    No ``k x |idx|`` gathered copy of ``b`` is ever built; the reference path
    touches ``block`` entries of one row of ``b`` at a time.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    m, k = a.shape
    if b.shape[0] != k:
        raise ShapeError(f"indexed_gemm_cols shape mismatch: {a.shape} x {b.shape}")
    idx = index_set(idx, b.shape[1])
    _check_block(block)
    out = np.zeros((m, idx.size), dtype=np.float32)
    if fast:
        from ._fastpath import cols_kernel

        cols_kernel(np.ascontiguousarray(a), b, idx, out, block)
        return out
    for j0 in range(0, idx.size, block):
        sel = idx[j0:j0 + block]
        acc = out[:, j0:j0 + block]
        for p in range(k):
            acc += a[:, p, None] * b[p, sel]
    return out


def indexed_gemm_rows(a, b, idx, *, block: int = DEFAULT_BLOCK, fast: bool = False) -> np.ndarray:
    """``a @ b[idx].T``: dot products of every row of ``a`` with selected rows of ``b``.

    This is the ``Q K_sel^T`` form used when attending over a subset of cached
    keys.  ``b`` may be a strided view (one head's columns of a key cache).
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    m, k = a.shape
    if b.shape[1] != k:
        raise ShapeError(f"indexed_gemm_rows shape mismatch: {a.shape} vs rows of {b.shape}")
    idx = index_set(idx, b.shape[0])
    _check_block(block)
    out = np.zeros((m, idx.size), dtype=np.float32)
    if fast:
        from ._fastpath import rows_kernel

        rows_kernel(np.ascontiguousarray(a), b, idx, out, block)
        return out
    for j0 in range(0, idx.size, block):
        sel = idx[j0:j0 + block]
        acc = out[:, j0:j0 + block]
        for p in range(k):
            acc += a[:, p, None] * b[sel, p]
    return out


def indexed_gemm_inner(a, b, idx, *, fast: bool = False) -> np.ndarray:
    """``a @ b[idx]``: contract ``a`` (m x |idx|) against selected rows of ``b``.

    This is the ``A V_sel`` form of attention; the selected rows of ``b`` are
    read as views, accumulated in ascending ``idx`` order.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    idx = index_set(idx, b.shape[0])
    m = a.shape[0]
    if a.shape[1] != idx.size:
        raise ShapeError(f"indexed_gemm_inner: a has {a.shape[1]} columns for {idx.size} selected rows")
    out = np.zeros((m, b.shape[1]), dtype=np.float32)
    if fast:
        from ._fastpath import inner_kernel

        inner_kernel(np.ascontiguousarray(a), b, idx, out)
        return out
    for j in range(idx.size):
        out += a[:, j, None] * b[idx[j], None, :]
    return out


def _check_block(block: int) -> None:
    if block < 1:
        raise ShapeError(f"block size must be >= 1, got {block}")


def softmax_row(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float32).reshape(-1)
    if v.size == 0:
        raise ShapeError("softmax of an empty vector")
    e = np.exp(v - v.max())
    return e / e.sum(dtype=np.float32)


def softmax_rows(x: np.ndarray, lengths: np.ndarray | None = None) -> np.ndarray:
    """Row-wise softmax; with ``lengths``, row ``i`` only covers its first ``lengths[i]`` entries."""
    x = np.asarray(x, dtype=np.float32)
    if lengths is None:
        mask = np.ones(x.shape, dtype=bool)
    else:
        mask = np.arange(x.shape[1])[None, :] < np.asarray(lengths)[:, None]
    shifted = np.where(mask, x, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(shifted), np.float32(0.0)).astype(np.float32)
    return e / e.sum(axis=1, keepdims=True, dtype=np.float32)


# --------------------------------------------------------------------------- SplitMix64


@dataclass(frozen=True)
class Rng64:
    state: int = 0

    def __post_init__(self):
        object.__setattr__(self, "state", int(self.state) & _MASK64)


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def rng_next(r: Rng64) -> tuple[int, Rng64]:
    """One SplitMix64 step: returns ``(output, advanced generator)``."""
    state = (r.state + _GAMMA) & _MASK64
    return _mix(state), Rng64(state)


def rng_stream(r: Rng64, count: int) -> tuple[np.ndarray, Rng64]:
    """The next ``count`` outputs as a uint64 array (vectorised :func:`rng_next`)."""
    steps = np.arange(1, count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(r.state) + steps * np.uint64(_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    z = z ^ (z >> np.uint64(31))
    return z, Rng64((r.state + count * _GAMMA) & _MASK64)


def rng_uniform(r: Rng64, count: int, lo: float, hi: float) -> tuple[np.ndarray, Rng64]:
    """``count`` float32 values: ``lo + (hi - lo) * (next >> 40) / 2**24``, computed in float64."""
    raw, r = rng_stream(r, count)
    u = (raw >> np.uint64(40)).astype(np.float64) / float(1 << 24)
    return (lo + (hi - lo) * u).astype(np.float32), r


def rng_uniform_matrix(r: Rng64, shape: Sequence[int], lo: float, hi: float) -> tuple[np.ndarray, Rng64]:
    rows, cols = shape
    flat, r = rng_uniform(r, rows * cols, lo, hi)
    return flat.reshape(rows, cols), r
