"""
Comparing cache policies on one prompt
======================================

A toy decoder generates the same continuation under five cache policies.
We look at how much of the full cache each one keeps, how much it reads,
and how long its tokens agree with the full-cache run.
"""

# %%
# Build a small model and a prompt that is mostly vision tokens.
import numpy as np

from avlkv import (AvlPolicy, AvlPolicyConfig, FastVPolicy, FullPolicy, H2OPolicy, ModelConfig,
                   SegmentedPrompt, StreamingPolicy, generate, init_weights, synthetic_vision)

config = ModelConfig(n_layers=4, n_heads=4, d_model=32, d_ff=128, vocab_size=64, max_text_tokens=36)
weights = init_weights(config, seed=0)
prompt = SegmentedPrompt(system_tokens=list(range(1, 11)),
                         vision_embeddings=synthetic_vision(7, 100, config.d_model),
                         instruction_tokens=list(range(20, 40)))

# %%
# Run every policy for 16 new tokens.
policies = {
    "full": FullPolicy(),
    "avl": AvlPolicy(AvlPolicyConfig(45, 30, 3, 90, 70)),
    "h2o": H2OPolicy(window=64),
    "streaming": StreamingPolicy(sink=4, recent=64),
    "fastv": FastVPolicy(keep_pct=50),
}
runs = {name: generate(weights, config, prompt, p, 16) for name, p in policies.items()}
reference = runs["full"].tokens

# %%
# Stored is what stays in the cache, used is what attention actually reads.
# A-VL reads less than it stores because normal steps skip secondary vision.
print(f"{'policy':>10} {'stored':>7} {'used':>7} {'prefix':>6}")
for name, res in runs.items():
    prefix = next((i for i, (a, b) in enumerate(zip(res.tokens, reference)) if a != b), len(reference))
    print(f"{name:>10} {float(res.stats.stored_fraction):7.3f} {float(res.stats.used_fraction):7.3f} {prefix:6d}")

# %%
# Per-layer vision slot counts for A-VL: layers 1 and 2 see all 100 vision
# tokens, later layers only the 90 kept after pruning, and only the
# secondary tier (45) is stored.
avl = runs["avl"].prefill
print("vision present per layer:", avl.vision_present)
print("vision stored per layer: ", avl.vision_stored)
