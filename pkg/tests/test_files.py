import json

import numpy as np
import pytest

from avlkv.errors import ConfigError, PromptError
from avlkv.files import (file_digest, load_model_config, load_policy, load_prompt, load_weights,
                         save_prompt, save_weights, weights_to_bytes)
from avlkv.model import ModelConfig, init_weights
from avlkv.policies import AvlPolicy

from test_tensor import splitmix64_reference

GOLDEN = json.loads((__import__("pathlib").Path(__file__).parent / "data" / "golden_digests.json").read_text())


def test_weight_roundtrip(tmp_path, small_model):
    cfg, w = small_model
    path = save_weights(tmp_path / "w.bin", cfg, w)
    cfg2, w2 = load_weights(path)
    assert cfg2 == cfg
    assert all(np.array_equal(a, b) for a, b in zip(w.tensors(), w2.tensors()))
    assert save_weights(tmp_path / "w2.bin", cfg2, w2).read_bytes() == path.read_bytes()


def test_weight_file_layout(small_model):
    cfg, w = small_model
    data = weights_to_bytes(cfg, w)
    assert data[:4] == b"AVLW"
    assert int.from_bytes(data[4:8], "little") == 1
    n_params = sum(t.size for t in w.tensors())
    assert len(data) == 8 + 7 * 4 + 4 * n_params
    # first tensor value is the first SplitMix64 draw mapped into [-0.1, 0.1]
    first = splitmix64_reference(3, 1)[0]
    expect = np.float32(-0.1 + 0.2 * ((first >> 40) / 2**24))
    assert np.frombuffer(data, "<f4", count=1, offset=36)[0] == expect


@pytest.mark.parametrize("case", GOLDEN["weights"])
def test_golden_weight_digest(tmp_path, case):
    cfg = ModelConfig.from_dict(case["config"])
    path = save_weights(tmp_path / "w.bin", cfg, init_weights(cfg, case["seed"]))
    assert file_digest(path) == case["sha256"]


def test_corrupt_weight_files(tmp_path, small_model):
    cfg, w = small_model
    good = weights_to_bytes(cfg, w)
    for name, blob in [("magic", b"XXXX" + good[4:]), ("short", good[:-4]), ("long", good + b"\0" * 4)]:
        p = tmp_path / name
        p.write_bytes(blob)
        with pytest.raises(ConfigError):
            load_weights(p)


def test_prompt_roundtrip(tmp_path):
    path = save_prompt(tmp_path / "p.json", [1, 2], 5, 6, [3])
    p = load_prompt(path, 8)
    assert p.n_system == 2 and p.n_vision == 6 and p.n_instruction == 1
    np.save(tmp_path / "v.npy", np.ones((4, 8), np.float32))
    (tmp_path / "q.json").write_text(json.dumps({"system": [], "vision": {"path": "v.npy"}, "instruction": [1]}))
    assert load_prompt(tmp_path / "q.json", 8).n_vision == 4


@pytest.mark.parametrize("obj", [
    {"system": [1], "vision": {"seed": 1, "count": 0}, "instruction": [1]},
    {"system": [1], "vision": {"seed": 1}, "instruction": [1]},
    {"system": ["a"], "vision": {"seed": 1, "count": 2}, "instruction": [1]},
    {"system": [1], "vision": {"path": "missing.npy"}, "instruction": [1]},
    {"system": [1], "vision": {"seed": 1, "count": 2}, "instruction": [1], "audio": []},
])
def test_prompt_errors(tmp_path, obj):
    p = tmp_path / "p.json"
    p.write_text(json.dumps(obj))
    with pytest.raises(PromptError):
        load_prompt(p, 8)


def test_json_errors_name_location(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text('{\n  "n_layers": 4,\n  oops\n}')
    with pytest.raises(ConfigError, match="cfg.json:3"):
        load_model_config(str(p))
    with pytest.raises(PromptError, match="not found"):
        load_prompt(tmp_path / "nope.json", 8)


def test_load_policy_forms(tmp_path):
    assert load_policy("full").name == "full"
    p = tmp_path / "pol.json"
    p.write_text(json.dumps({"policy": "avl", "S": 45}))
    assert isinstance(load_policy(str(p)), AvlPolicy)
    assert load_policy('{"policy": "avl", "K": 5}').config.update_every == 5
