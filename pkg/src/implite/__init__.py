"""Desk-scale multimodal LLM inference stack.

Single-file model containers, byte-level BPE tokenization, a ViT encoder
with a two-layer MLP connector into a KV-cached decoder LLM, blockwise
8/4-bit weight quantization, LoRA merging, a stage-decomposed latency
profiler, and a streaming chat server.
"""

__version__ = "0.1.0"

from .container import ModelManifest, inspect_container, read_container, write_container
from .llm import GenerationConfig
from .profiler import StageTimings, profile_inference, total_latency
from .runner import ImpModel
from .tensor import Tensor

__all__ = [
    "GenerationConfig",
    "ImpModel",
    "ModelManifest",
    "StageTimings",
    "Tensor",
    "__version__",
    "inspect_container",
    "profile_inference",
    "read_container",
    "total_latency",
    "write_container",
]
