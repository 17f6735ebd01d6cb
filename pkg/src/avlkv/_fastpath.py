"""numba kernels behind ``fast=True``.

The rows kernel walks the selection in blocks of ``block`` entries and keeps a
4 x 4 tile of accumulators in registers, so each selected key row is streamed
from memory once per four query rows.  Reductions reassociate (fastmath).
"""
import numba
import numpy as np


@numba.njit(fastmath=True, cache=True)
def _dot_row(a, i, b, r, k):
    s = np.float32(0.0)
    for p in range(k):
        s += a[i, p] * b[r, p]
    return s


@numba.njit(fastmath=True, cache=True)
def rows_kernel(a, b, idx, out, block):
    m, k = a.shape
    nsel = idx.shape[0]
    for j0 in range(0, nsel, block):
        j1 = min(j0 + block, nsel)
        i = 0
        while i + 4 <= m:
            j = j0
            while j + 4 <= j1:
                r0 = idx[j]
                r1 = idx[j + 1]
                r2 = idx[j + 2]
                r3 = idx[j + 3]
                s00 = s01 = s02 = s03 = np.float32(0.0)
                s10 = s11 = s12 = s13 = np.float32(0.0)
                s20 = s21 = s22 = s23 = np.float32(0.0)
                s30 = s31 = s32 = s33 = np.float32(0.0)
                for p in range(k):
                    b0 = b[r0, p]
                    b1 = b[r1, p]
                    b2 = b[r2, p]
                    b3 = b[r3, p]
                    a0 = a[i, p]
                    a1 = a[i + 1, p]
                    a2 = a[i + 2, p]
                    a3 = a[i + 3, p]
                    s00 += a0 * b0
                    s01 += a0 * b1
                    s02 += a0 * b2
                    s03 += a0 * b3
                    s10 += a1 * b0
                    s11 += a1 * b1
                    s12 += a1 * b2
                    s13 += a1 * b3
                    s20 += a2 * b0
                    s21 += a2 * b1
                    s22 += a2 * b2
                    s23 += a2 * b3
                    s30 += a3 * b0
                    s31 += a3 * b1
                    s32 += a3 * b2
                    s33 += a3 * b3
                out[i, j] = s00
                out[i, j + 1] = s01
                out[i, j + 2] = s02
                out[i, j + 3] = s03
                out[i + 1, j] = s10
                out[i + 1, j + 1] = s11
                out[i + 1, j + 2] = s12
                out[i + 1, j + 3] = s13
                out[i + 2, j] = s20
                out[i + 2, j + 1] = s21
                out[i + 2, j + 2] = s22
                out[i + 2, j + 3] = s23
                out[i + 3, j] = s30
                out[i + 3, j + 1] = s31
                out[i + 3, j + 2] = s32
                out[i + 3, j + 3] = s33
                j += 4
            while j < j1:
                for ii in range(i, i + 4):
                    out[ii, j] = _dot_row(a, ii, b, idx[j], k)
                j += 1
            i += 4
        while i < m:
            for j in range(j0, j1):
                out[i, j] = _dot_row(a, i, b, idx[j], k)
            i += 1


@numba.njit(fastmath=True, cache=True)
def cols_kernel(a, b, idx, out, block):
    m, k = a.shape
    nsel = idx.shape[0]
    for j0 in range(0, nsel, block):
        j1 = min(j0 + block, nsel)
        for i in range(m):
            for p in range(k):
                av = a[i, p]
                for j in range(j0, j1):
                    out[i, j] += av * b[p, idx[j]]


@numba.njit(fastmath=True, cache=True)
def inner_kernel(a, b, idx, out):
    m = a.shape[0]
    n = b.shape[1]
    for i in range(m):
        for j in range(idx.shape[0]):
            w = a[i, j]
            r = idx[j]
            for c in range(n):
                out[i, c] += w * b[r, c]
