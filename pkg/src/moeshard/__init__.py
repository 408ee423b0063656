"""Expert-sharded MoE inference simulator with an expert-parallel baseline."""

from .comm import ClusterConfig, SequentialScheduler, ThreadedScheduler
from .costmodel import CostModelParams, RunMetrics, ecdf, load_balance_stats, simulate_layer_latency, ttft
from .engine import (
    CapacityPolicy,
    FusionMode,
    MoELayer,
    forward_ep_baseline,
    forward_sharded,
    reference_forward_dense,
    trace_ep,
    trace_sharded,
)
from .expert import ExpertParams, extract_shard, make_shard_plan
from .router import LinearRouter, LinearRouterParams, SkewedRouter, SkewedRouterParams

__version__ = "0.1.0"

__all__ = [
    "CapacityPolicy", "ClusterConfig", "CostModelParams", "ExpertParams", "FusionMode",
    "LinearRouter", "LinearRouterParams", "MoELayer", "RunMetrics", "SequentialScheduler",
    "SkewedRouter", "SkewedRouterParams", "ThreadedScheduler", "ecdf", "extract_shard",
    "forward_ep_baseline", "forward_sharded", "load_balance_stats", "make_shard_plan",
    "reference_forward_dense", "simulate_layer_latency", "trace_ep", "trace_sharded", "ttft",
]
