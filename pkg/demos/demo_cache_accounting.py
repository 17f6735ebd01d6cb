"""
Counting slots step by step
===========================

With no pruning and an unbounded text window, the A-VL cache sizes follow a
simple pattern. Here we print them next to the full-cache count.
"""

# %%
from avlkv import AvlPolicy, AvlPolicyConfig, ModelConfig, SegmentedPrompt, generate, init_weights, synthetic_vision

config = ModelConfig(n_layers=4, n_heads=4, d_model=32, d_ff=64, vocab_size=64, max_text_tokens=30)
prompt = SegmentedPrompt(list(range(10)), synthetic_vision(1, 100, 32), list(range(20, 40)))
res = generate(init_weights(config, 1), config, prompt, AvlPolicy(AvlPolicyConfig(40, 30, 3, 100, 100)), 10)

# %%
# Layer 1 only; the other layers match. Update steps (3, 6, 9) read all 40
# secondary vision slots, other steps read the 30 core ones.
for r in res.records.records:
    if r.layer == 1:
        print(f"step {r.step:2d}: stored {r.stored_slots:3d}  used {r.used_slots:3d}  full {r.full_slots:3d}")

# %%
s = res.stats
print("stored fraction", s.stored_fraction, "=", round(float(s.stored_fraction), 4))
print("used fraction  ", s.used_fraction, "=", round(float(s.used_fraction), 4))
