"""Modality-aware KV-cache management for decoder-only transformer inference.

A-VL adaptive attention (core/secondary/minor vision tiers with periodic core
refresh, prefill vision pruning, windowed text eviction), baseline policies,
a deterministic toy decoder to run them, and attention-analysis tools.
"""
from .cache import CacheStats, LayerKvCache, SlotMeta, StatsRecorder, collect_stats, used_set
from .errors import (AvlError, ConfigError, PolicyError, PromptError, ShapeError, SlotIndexError,
                     StateError, TraceError)
from .metrics import (AttentionTrace, FlopCounter, attention_flops, attention_score, ppci,
                      ppci_matrix, segment_shares)
from .model import (DecoderWeights, GenerationResult, ModelConfig, SegmentedPrompt, decode_step,
                    generate, init_weights, prefill, synthetic_vision)
from .policies import (AvlPolicy, AvlPolicyConfig, CachePolicy, FastVPolicy, FullPolicy, H2OPolicy,
                       StreamingPolicy, TextWindowState, VisionClassification, classify_vision,
                       is_update_step, policy_from_dict, prefill_prune, text_step, update_core)
from .segments import Segment
from .tensor import (Rng64, indexed_gemm_cols, indexed_gemm_inner, indexed_gemm_rows, matmul,
                     rng_next, softmax_row)

__version__ = "0.1.0"
