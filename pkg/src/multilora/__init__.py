"""Serve many LoRA adapters over one base model."""

from .engine import (
    AdapterBank,
    LoraEngine,
    ServingMode,
    batched_masked_forward,
    merge_weights,
    unmerge_weights,
)
from .linalg import LoraLayerDelta, lora_delta_apply, lora_forward, matmul
from .model import ModelConfig, Placement, ToyModel, attach_placement, build_model, model_forward
from .registry import (
    AdapterRegistry,
    LoraAdapter,
    Manifest,
    deserialize_adapter,
    diff_sync_plan,
    serialize_adapter,
)
from .scheduler import CostModel, InferenceRequest, RequestQueue, SchedulerConfig, simulate_workload

__all__ = [
    "AdapterBank",
    "AdapterRegistry",
    "CostModel",
    "InferenceRequest",
    "LoraAdapter",
    "LoraEngine",
    "LoraLayerDelta",
    "Manifest",
    "ModelConfig",
    "Placement",
    "RequestQueue",
    "SchedulerConfig",
    "ServingMode",
    "ToyModel",
    "attach_placement",
    "batched_masked_forward",
    "build_model",
    "deserialize_adapter",
    "diff_sync_plan",
    "lora_delta_apply",
    "lora_forward",
    "matmul",
    "merge_weights",
    "model_forward",
    "serialize_adapter",
    "simulate_workload",
    "unmerge_weights",
]
