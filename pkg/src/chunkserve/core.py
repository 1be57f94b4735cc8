"""Shared domain types: model/GPU/cluster descriptions, requests, deployments."""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass
from importlib import resources
from typing import Optional


class DeploymentError(ValueError):
    """Raised when a model cannot be laid out on a cluster."""


@dataclass(frozen=True)
class ModelSpec:
    """Architectural parameters that drive FLOP and byte accounting.

    ``ffn_hidden`` is the width of the two-matrix FFN. Gated FFNs (three
    matrices) are represented by their parameter-equivalent two-matrix width.
    """

    name: str
    num_layers: int
    num_heads: int
    hidden_size: int
    ffn_hidden: int
    bytes_per_param: int = 2
    max_seq_len: int = 2048
    vocab_size: int = 32000

    def __post_init__(self) -> None:
        for attr in ("num_layers", "num_heads", "hidden_size", "ffn_hidden",
                     "bytes_per_param", "max_seq_len", "vocab_size"):
            if getattr(self, attr) <= 0:
                raise ValueError(f"{attr} must be positive, got {getattr(self, attr)}")
        if self.hidden_size % self.num_heads:
            raise ValueError("hidden_size must be divisible by num_heads")
        if self.ffn_hidden < self.hidden_size:
            raise ValueError("ffn_hidden must be >= hidden_size")

    @property
    def params_per_layer(self) -> int:
        h, h2 = self.hidden_size, self.ffn_hidden
        # preproj [H,3H] + postproj [H,H] + ffn_ln1 [H,H2] + ffn_ln2 [H2,H]
        return 3 * h * h + h * h + h * h2 + h2 * h

    @property
    def embedding_params(self) -> int:
        return self.vocab_size * self.hidden_size

    @property
    def num_params(self) -> int:
        return self.num_layers * self.params_per_layer + self.embedding_params

    @property
    def param_bytes(self) -> int:
        return self.num_params * self.bytes_per_param


@dataclass(frozen=True)
class GpuSpec:
    name: str
    peak_flops: float
    mem_bandwidth: float
    mem_capacity: float
    tile_size: int = 128
    compute_efficiency: float = 0.7
    memory_efficiency: float = 0.8
    kernel_overhead: float = 10e-6

    def __post_init__(self) -> None:
        if self.peak_flops <= 0 or self.mem_bandwidth <= 0 or self.mem_capacity <= 0:
            raise ValueError("peak_flops, mem_bandwidth and mem_capacity must be positive")
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        for attr in ("compute_efficiency", "memory_efficiency"):
            v = getattr(self, attr)
            if not 0 < v <= 1:
                raise ValueError(f"{attr} must lie in (0, 1], got {v}")
        if self.kernel_overhead < 0:
            raise ValueError("kernel_overhead must be >= 0")

    @property
    def ridge_point(self) -> float:
        """Effective FLOP/byte ratio above which a kernel is compute-bound."""
        return (self.peak_flops * self.compute_efficiency) / (
            self.mem_bandwidth * self.memory_efficiency)


@dataclass(frozen=True)
class ClusterSpec:
    gpu: GpuSpec
    tp_degree: int = 1
    pp_degree: int = 1
    num_replicas: int = 1
    intra_node_bw: float = 300e9
    inter_node_bw: float = 25e9
    link_latency: float = 5e-6

    def __post_init__(self) -> None:
        for attr in ("tp_degree", "pp_degree", "num_replicas"):
            if getattr(self, attr) < 1:
                raise ValueError(f"{attr} must be >= 1")
        if self.intra_node_bw <= 0 or self.inter_node_bw <= 0:
            raise ValueError("link bandwidths must be positive")
        if self.link_latency < 0:
            raise ValueError("link_latency must be >= 0")


@dataclass
class Request:
    """One inference job. Progress cursors are mutated by the engine only."""

    id: int
    arrival_time: float
    prefill_len: int
    decode_len: int
    prefill_done: int = 0
    decode_done: int = 0
    completion_time: Optional[float] = None

    def __post_init__(self) -> None:
        if self.prefill_len < 1:
            raise ValueError(f"request {self.id}: prefill_len must be >= 1")
        if self.decode_len < 0:
            raise ValueError(f"request {self.id}: decode_len must be >= 0")
        self._check_cursors()

    def _check_cursors(self) -> None:
        if not 0 <= self.prefill_done <= self.prefill_len:
            raise ValueError(f"request {self.id}: prefill_done out of range")
        if not 0 <= self.decode_done <= self.decode_len:
            raise ValueError(f"request {self.id}: decode_done out of range")
        if self.decode_done > 0 and self.prefill_done != self.prefill_len:
            raise ValueError(f"request {self.id}: decoding before prefill finished")

    @property
    def seq_len(self) -> int:
        return self.prefill_len + self.decode_len

    @property
    def prefill_remaining(self) -> int:
        return self.prefill_len - self.prefill_done

    @property
    def in_decode(self) -> bool:
        return self.prefill_done == self.prefill_len and self.decode_done < self.decode_len

    @property
    def finished(self) -> bool:
        return self.completion_time is not None

    @property
    def kv_tokens(self) -> int:
        return self.prefill_done + self.decode_done

    def advance_prefill(self, tokens: int, now: float) -> None:
        if tokens < 1 or tokens > self.prefill_remaining:
            raise ValueError(f"request {self.id}: bad prefill advance {tokens}")
        self.prefill_done += tokens
        if self.prefill_done == self.prefill_len and self.decode_len == 0:
            self._complete(now)

    def advance_decode(self, now: float) -> None:
        if not self.in_decode:
            raise ValueError(f"request {self.id}: not in decode phase")
        self.decode_done += 1
        if self.decode_done == self.decode_len:
            self._complete(now)

    def _complete(self, now: float) -> None:
        if self.completion_time is not None:
            raise RuntimeError(f"request {self.id} completed twice")
        self.completion_time = now

    def fresh_copy(self) -> "Request":
        return Request(self.id, self.arrival_time, self.prefill_len, self.decode_len)


@dataclass(frozen=True)
class PdRatio:
    value: float

    def __post_init__(self) -> None:
        if not (self.value > 0 and math.isfinite(self.value)):
            raise ValueError(f"P:D ratio must be a positive finite number, got {self.value}")

    def __float__(self) -> float:
        return float(self.value)


@dataclass(frozen=True)
class Deployment:
    """A model laid out over a cluster, with per-GPU parameter bytes."""

    model: ModelSpec
    cluster: ClusterSpec
    layers_per_stage: int
    param_bytes_per_gpu: float

    @property
    def tp(self) -> int:
        return self.cluster.tp_degree

    @property
    def pp(self) -> int:
        return self.cluster.pp_degree

    @property
    def kv_bytes_per_token(self) -> float:
        """KV bytes one token occupies on a single GPU of this deployment."""
        m = self.model
        return 2 * self.layers_per_stage * (m.hidden_size / self.tp) * m.bytes_per_param


def validate_deployment(model: ModelSpec, cluster: ClusterSpec) -> Deployment:
    if model.num_layers % cluster.pp_degree:
        raise DeploymentError(
            f"{model.num_layers} layers cannot be split evenly into "
            f"{cluster.pp_degree} pipeline stages")
    if model.hidden_size % cluster.tp_degree:
        raise DeploymentError(
            f"hidden size {model.hidden_size} is not divisible by tp={cluster.tp_degree}")
    return Deployment(
        model=model,
        cluster=cluster,
        layers_per_stage=model.num_layers // cluster.pp_degree,
        param_bytes_per_gpu=model.param_bytes / cluster.tp_degree / cluster.pp_degree,
    )


# --- presets -----------------------------------------------------------------

def _read_preset(name: str) -> configparser.SectionProxy:
    text = resources.files("chunkserve.presets").joinpath(f"{name}.ini").read_text("utf-8")
    parser = configparser.ConfigParser()
    parser.read_string(text)
    section = "model" if parser.has_section("model") else "gpu"
    return parser[section]


def model_from_section(sec) -> ModelSpec:
    return ModelSpec(
        name=sec["name"],
        num_layers=int(sec["num_layers"]),
        num_heads=int(sec["num_heads"]),
        hidden_size=int(sec["hidden_size"]),
        ffn_hidden=int(sec["ffn_hidden"]),
        bytes_per_param=int(sec.get("bytes_per_param", "2")),
        max_seq_len=int(sec.get("max_seq_len", "2048")),
        vocab_size=int(sec.get("vocab_size", "32000")),
    )


def gpu_from_section(sec) -> GpuSpec:
    return GpuSpec(
        name=sec["name"],
        peak_flops=float(sec["peak_flops"]),
        mem_bandwidth=float(sec["mem_bandwidth"]),
        mem_capacity=float(sec["mem_capacity"]),
        tile_size=int(sec.get("tile_size", "128")),
        compute_efficiency=float(sec.get("compute_efficiency", "0.7")),
        memory_efficiency=float(sec.get("memory_efficiency", "0.8")),
        kernel_overhead=float(sec.get("kernel_overhead", "10e-6")),
    )


MODEL_PRESETS = ("llama-13b", "llama-33b", "gpt3")
GPU_PRESETS = ("a6000", "a100")


def model_preset(name: str) -> ModelSpec:
    if name not in MODEL_PRESETS:
        raise KeyError(f"unknown model preset {name!r}; choose from {MODEL_PRESETS}")
    return model_from_section(_read_preset(name))


def gpu_preset(name: str) -> GpuSpec:
    if name not in GPU_PRESETS:
        raise KeyError(f"unknown GPU preset {name!r}; choose from {GPU_PRESETS}")
    return gpu_from_section(_read_preset(name))
