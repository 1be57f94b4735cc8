"""Performance-model simulator for chunked prefills and decode-piggybacking
batch schedules in LLM inference serving."""

from .core import (ClusterSpec, Deployment, DeploymentError, GpuSpec, ModelSpec, PdRatio,
                   Request, gpu_preset, model_preset, validate_deployment)
from .costmodel import (AnalyticalCostModel, BatchComposition, DecodeItem, OpCost, OpKind,
                        PrefillItem, ProfileCostModel, batch_time_analytical, ingest_profile,
                        op_cost, profile_time, roofline_time, tile_penalty_demo)
from .chunker import (advise_chunk_size, kv_reload_tokens, mask_for_chunk, optimal_pd,
                      plan_chunks, toy_chunked_prefill, toy_full_prefill)
from .sched import (CapacityModel, Scheduler, SchedulerPolicy, kv_occupancy, max_batch_size,
                    next_batch, pipeline_batch_size)
from .engine import classify_bubble, per_request_bubble, run_pipeline, run_replica
from .workload import WorkloadSpec, build_requests, sample_lengths, split_pd
from .report import compare_runs, compute_metrics, marginal_decode_time, percentile

__version__ = "0.1.0"

__all__ = [
    "advise_chunk_size", "AnalyticalCostModel", "batch_time_analytical", "BatchComposition",
    "build_requests", "CapacityModel", "classify_bubble", "ClusterSpec", "compare_runs",
    "compute_metrics", "DecodeItem", "Deployment", "DeploymentError", "gpu_preset", "GpuSpec",
    "ingest_profile", "kv_occupancy", "kv_reload_tokens", "marginal_decode_time",
    "mask_for_chunk", "max_batch_size", "model_preset", "ModelSpec", "next_batch", "op_cost",
    "OpCost", "OpKind", "optimal_pd", "PdRatio", "per_request_bubble", "percentile",
    "pipeline_batch_size", "plan_chunks", "PrefillItem", "profile_time", "ProfileCostModel",
    "Request", "roofline_time", "run_pipeline", "run_replica", "sample_lengths", "Scheduler",
    "SchedulerPolicy", "split_pd", "tile_penalty_demo", "toy_chunked_prefill",
    "toy_full_prefill", "validate_deployment", "WorkloadSpec",
]
