"""
How stable is the attention ranking?
====================================

Records the attention scores of the newest query at every layer and step,
then measures how much the top half of the ranking overlaps between layers
and between decode steps.
"""

# %%
import numpy as np

from avlkv import FullPolicy, ModelConfig, Segment, SegmentedPrompt, generate, init_weights, synthetic_vision
from avlkv.metrics import ppci_matrix

config = ModelConfig(n_layers=6, n_heads=4, d_model=32, d_ff=64, vocab_size=64)
weights = init_weights(config, seed=3)
prompt = SegmentedPrompt([1, 2, 3, 4], synthetic_vision(11, 64, config.d_model), [9, 10, 11, 12, 13])
res = generate(weights, config, prompt, FullPolicy(), 12, trace=True)
trace = res.trace
print(len(trace), "trace entries")

# %%
# Share of attention mass per segment in the prefill step.
for layer in trace.layers:
    shares = trace[(layer, 0)].shares()
    print(layer, "  ".join(f"{g.label} {shares[g]:.2f}" for g in Segment))

# %%
# Overlap of the top 50% against layer 1, at the last prompt position.
for cell in ppci_matrix(trace, "layer", 50):
    print(f"layer {cell.layer}: {cell.ppci:.2f}")

# %%
# Overlap of the vision ranking against the first decode step, per layer.
cells = ppci_matrix(trace, "step", 50, segment=Segment.VISION)
table = {}
for c in cells:
    table.setdefault(c.layer, []).append(c.ppci)
for layer, row in table.items():
    print(layer, np.round(row, 2))
