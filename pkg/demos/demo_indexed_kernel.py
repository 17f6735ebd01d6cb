"""
Reading a subset of the cache without copying it
================================================

Multiplying against 30% of a key matrix. Slicing first copies the rows,
which costs about as much as the full product. The indexed kernel reads
the selected rows in place.
"""

# %%
import numpy as np

from avlkv.bench import bench_cell, bench_inputs, relative_error
from avlkv.tensor import indexed_gemm_rows

a, keys, idx = bench_inputs(d=512, ratio=0.3, batch=4, seed=0)
got = indexed_gemm_rows(a, keys, idx)
print("selected rows:", idx.size, "of", keys.shape[0])
print("relative error vs slicing:", relative_error(got, a @ keys[idx].T))

# %%
# Timing at the larger size. Medians over 100 runs after 10 warmups.
for batch in (1, 8, 32):
    row = bench_cell(2048, 0.3, batch)
    print(f"batch {batch:2d}: full {row.full_s * 1e3:.2f} ms  slice {row.slice_s * 1e3:.2f} ms  "
          f"indexed {row.indexed_s * 1e3:.2f} ms")
