import json

import numpy as np
import pytest

from avlkv.model import ModelConfig, SegmentedPrompt, init_weights, synthetic_vision


def make_prompt(config, n_system=3, n_vision=10, n_instruction=4, seed=0):
    rng = np.random.default_rng(seed)
    return SegmentedPrompt(
        rng.integers(0, config.vocab_size, n_system).tolist(),
        synthetic_vision(seed + 1000, n_vision, config.d_model),
        rng.integers(0, config.vocab_size, n_instruction).tolist(),
    )


def reference_logits(weights, config, prompt, generated):
    """Float64 full-sequence forward pass, no cache; logits of the last position."""
    f = lambda x: np.asarray(x, dtype=np.float64)
    tok = f(weights.token_embedding)
    ids_pre = prompt.system_tokens
    ids_post = list(prompt.instruction_tokens) + list(generated)
    h = np.concatenate([tok[ids_pre].reshape(-1, config.d_model), f(prompt.vision_embeddings), tok[ids_post]])
    n = h.shape[0]
    h = h + f(weights.position_embedding[:n])

    def norm(x, s):
        return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + 1e-5) * f(s)

    dh = config.d_head
    causal = np.tril(np.ones((n, n), dtype=bool))
    for lw in weights.layers:
        x = norm(h, lw.attn_norm)
        q, k, v = x @ f(lw.wq), x @ f(lw.wk), x @ f(lw.wv)
        outs = []
        for hd in range(config.n_heads):
            c = slice(hd * dh, (hd + 1) * dh)
            s = q[:, c] @ k[:, c].T / np.sqrt(dh)
            s = np.where(causal, s, -np.inf)
            w = np.exp(s - s.max(axis=1, keepdims=True))
            w /= w.sum(axis=1, keepdims=True)
            outs.append(w @ v[:, c])
        h = h + np.concatenate(outs, axis=1) @ f(lw.wo)
        x = norm(h, lw.mlp_norm)
        u = x @ f(lw.w_up)
        h = h + (u / (1 + np.exp(-u))) @ f(lw.w_down)
    return norm(h[-1], weights.final_norm) @ tok.T


@pytest.fixture
def small_config():
    return ModelConfig(n_layers=3, n_heads=2, d_model=8, d_ff=16, vocab_size=32, max_text_tokens=24,
                       max_positions=128)


@pytest.fixture
def small_model(small_config):
    return small_config, init_weights(small_config, 3)


@pytest.fixture
def run_dir(tmp_path):
    cfg = {"n_layers": 4, "n_heads": 4, "d_model": 16, "d_ff": 32, "vocab_size": 40,
           "max_text_tokens": 20, "max_positions": 128}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    prompt = {"system": [1, 2, 3], "vision": {"seed": 11, "count": 24}, "instruction": [5, 6, 7, 8, 9]}
    (tmp_path / "prompt.json").write_text(json.dumps(prompt))
    return tmp_path


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
