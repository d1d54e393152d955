"""Deterministic in-process simulation of TP / CP / PP / DP execution with traced collectives."""

from .attention import ring_attention_cp, ulysses_attention
from .inference import GuidedDiT, cp_parallel_denoise
from .mesh import (
    CollectiveRecord, CollectiveTrace, DeviceGrid, ShardedTensor,
    all_gather, all_reduce, all_to_all, exchange, p2p, reduce_scatter,
)
from .pipeline import PPSchedule, ParallelResult, parallel_block, pp_execute
from .stdit import StditLayout, Variant, init_stdit_params, stdit_layer_forward, stdit_layer_reference, stdit_transition
from .tensor import tp_linear_forward

__all__ = [
    "CollectiveRecord", "CollectiveTrace", "DeviceGrid", "ShardedTensor", "GuidedDiT", "PPSchedule",
    "ParallelResult", "StditLayout", "Variant", "all_gather", "all_reduce", "all_to_all", "exchange", "p2p",
    "reduce_scatter", "ring_attention_cp", "ulysses_attention", "cp_parallel_denoise", "parallel_block",
    "pp_execute", "init_stdit_params", "stdit_layer_forward", "stdit_layer_reference", "stdit_transition",
    "tp_linear_forward",
]
