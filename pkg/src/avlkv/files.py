"""On-disk formats: weight files, prompt files, model and policy JSON.

Weight file layout (little-endian)::

    b"AVLW"  u32 version
    u32 x 7  n_layers n_heads d_model d_ff vocab_size max_text_tokens max_positions
    f32 ...  token_embedding, position_embedding,
             per layer: attn_norm Wq Wk Wv Wo mlp_norm W_up W_down,
             final_norm                      (each row-major)
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ._csv import write_text
from .errors import ConfigError, PromptError
from .model import (DecoderWeights, ModelConfig, SegmentedPrompt, synthetic_vision,
                    weight_shapes, weights_from_tensors)
from .policies import CachePolicy, policy_from_dict

MAGIC = b"AVLW"
VERSION = 1
_CONFIG_FIELDS = ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "max_text_tokens", "max_positions")


def weights_to_bytes(config: ModelConfig, weights: DecoderWeights) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<7I", *(getattr(config, f) for f in _CONFIG_FIELDS))]
    for t, shape in zip(weights.tensors(), weight_shapes(config)):
        if t.shape != shape:
            raise ConfigError(f"tensor shape {t.shape} does not match config shape {shape}")
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return b"".join(parts)


def save_weights(path, config: ModelConfig, weights: DecoderWeights) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(weights_to_bytes(config, weights))
    tmp.replace(path)
    return path


def load_weights(path) -> tuple[ModelConfig, DecoderWeights]:
    path = Path(path)
    data = path.read_bytes()
    header = 4 + 4 + 4 * len(_CONFIG_FIELDS)
    if len(data) < header or data[:4] != MAGIC:
        raise ConfigError(f"{path}: not an AVLW weight file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported weight file version {version}")
    config = ModelConfig(**dict(zip(_CONFIG_FIELDS, struct.unpack_from("<7I", data, 8))))
    tensors = []
    offset = header
    for shape in weight_shapes(config):
        count = int(np.prod(shape))
        if offset + 4 * count > len(data):
            raise ConfigError(f"{path}: truncated weight file")
        tensors.append(np.frombuffer(data, dtype="<f4", count=count, offset=offset)
                       .astype(np.float32).reshape(shape))
        offset += 4 * count
    if offset != len(data):
        raise ConfigError(f"{path}: {len(data) - offset} trailing bytes")
    return config, weights_from_tensors(config, tensors)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_json(path, error=ConfigError):
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise error(f"{path}: file not found") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise error(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None


def json_arg(value: str, error=ConfigError):
    """Inline JSON when ``value`` starts with ``{``, else a path to a JSON file."""
    if value.lstrip().startswith("{"):
        try:
            return json.loads(value)
        except json.JSONDecodeError as exc:
            raise error(f"inline JSON, line {exc.lineno}: {exc.msg}") from None
    return _load_json(value, error)


def load_model_config(value: str) -> ModelConfig:
    obj = json_arg(value)
    if not isinstance(obj, dict):
        raise ConfigError("model config must be a JSON object")
    return ModelConfig.from_dict(obj)


def load_policy(value: str) -> CachePolicy:
    """A policy name (defaults), inline JSON, or a JSON file path."""
    if value in {"full", "avl", "h2o", "streaming", "fastv"}:
        return policy_from_dict({"policy": value})
    return policy_from_dict(json_arg(value))


def prompt_from_dict(obj, d_model: int, base_dir: Path | None = None, source: str = "prompt") -> SegmentedPrompt:
    if not isinstance(obj, dict):
        raise PromptError(f"{source}: prompt must be a JSON object")
    unknown = set(obj) - {"system", "vision", "instruction"}
    if unknown:
        raise PromptError(f"{source}: unknown prompt fields {sorted(unknown)}")
    for key in ("system", "instruction"):
        val = obj.get(key, [])
        if not isinstance(val, list) or not all(isinstance(t, int) for t in val):
            raise PromptError(f"{source}: '{key}' must be a list of token ids")
    vision = obj.get("vision")
    if not isinstance(vision, dict):
        raise PromptError(f"{source}: 'vision' must be an object with seed+count or path")
    if set(vision) == {"seed", "count"}:
        count = vision["count"]
        if not isinstance(count, int) or count < 1:
            raise PromptError(f"{source}: vision count must be a positive integer")
        emb = synthetic_vision(int(vision["seed"]), count, d_model)
    elif set(vision) == {"path"}:
        vpath = Path(vision["path"])
        if not vpath.is_absolute() and base_dir is not None:
            vpath = base_dir / vpath
        try:
            emb = np.load(vpath).astype(np.float32)
        except FileNotFoundError:
            raise PromptError(f"{vpath}: vision embedding file not found") from None
    else:
        raise PromptError(f"{source}: 'vision' needs exactly {{seed, count}} or {{path}}")
    return SegmentedPrompt(obj.get("system", []), emb, obj.get("instruction", []))


def load_prompt(path, d_model: int) -> SegmentedPrompt:
    path = Path(path)
    return prompt_from_dict(_load_json(path, PromptError), d_model, path.parent, str(path))


def save_prompt(path, system, vision_seed: int, vision_count: int, instruction) -> Path:
    obj = {"system": list(system), "vision": {"seed": vision_seed, "count": vision_count},
           "instruction": list(instruction)}
    return write_text(path, json.dumps(obj) + "\n")
