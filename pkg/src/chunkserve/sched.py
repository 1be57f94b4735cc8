"""Batch construction policies and KV-cache capacity accounting."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Collection, Dict, Iterable, List, Optional, Sequence, Tuple

from .chunker import advise_chunk_size
from .core import Deployment, Request
from .costmodel import BatchComposition, DecodeItem, PrefillItem

# Fraction of device memory withheld for activations and workspace. Solved from
# B = floor((M_G(1-r) - M_S) / (L m_kv)) so that LLaMA-13B on a 48 GB A6000 at
# L=1024 gives B=18; any r in (0.1325, 0.1499] does, 0.14 sits inside.
CALIBRATED_RESERVE_FRACTION = 0.14


@dataclass(frozen=True)
class CapacityModel:
    mem_capacity: float        # M_G
    param_bytes: float         # M_S, per GPU
    kv_bytes_per_token: float  # m_kv, per GPU
    max_seq_len: int           # L
    reserve_fraction: float = CALIBRATED_RESERVE_FRACTION

    def __post_init__(self) -> None:
        if not 0 <= self.reserve_fraction < 1:
            raise ValueError("reserve_fraction must lie in [0, 1)")
        if self.kv_bytes_per_token <= 0:
            raise ValueError("kv_bytes_per_token must be positive")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")
        if self.mem_capacity <= 0 or self.param_bytes < 0:
            raise ValueError("mem_capacity must be positive and param_bytes non-negative")
        # an over-committed device is representable; it simply admits nothing

    @classmethod
    def for_deployment(cls, deployment: Deployment, max_seq_len: Optional[int] = None,
                       reserve_fraction: float = CALIBRATED_RESERVE_FRACTION) -> "CapacityModel":
        return cls(
            mem_capacity=deployment.cluster.gpu.mem_capacity,
            param_bytes=deployment.param_bytes_per_gpu,
            kv_bytes_per_token=deployment.kv_bytes_per_token,
            max_seq_len=max_seq_len or deployment.model.max_seq_len,
            reserve_fraction=reserve_fraction,
        )

    @property
    def kv_budget(self) -> float:
        """Bytes available for KV cache: M_G(1-r) - M_S."""
        return self.mem_capacity * (1 - self.reserve_fraction) - self.param_bytes

    @property
    def bytes_per_request(self) -> float:
        return self.max_seq_len * self.kv_bytes_per_token


def max_batch_size(cap: CapacityModel) -> int:
    budget = cap.kv_budget
    if budget <= 0:
        return 0
    return int(budget // cap.bytes_per_request)


def pipeline_batch_size(cap: CapacityModel, pp_degree: int) -> int:
    """Per-micro-batch size when ``pp_degree`` micro-batches share the KV budget."""
    if pp_degree < 1:
        raise ValueError("pp_degree must be >= 1")
    return max_batch_size(cap) // pp_degree


def kv_occupancy(running: Iterable[Request], cap: CapacityModel) -> float:
    return sum(r.kv_tokens for r in running) * cap.kv_bytes_per_token


def can_admit(num_admitted: int, cap: CapacityModel) -> bool:
    """Admission check: every admitted request reserves its full L-token footprint."""
    return (num_admitted + 1) * cap.bytes_per_request <= cap.kv_budget


class PolicyKind(enum.Enum):
    REQUEST_LEVEL = "request_level"
    ORCA_BEST = "orca_best"
    ORCA_WORST = "orca_worst"
    DECODE_MAXIMAL = "decode_maximal"


@dataclass(frozen=True)
class SchedulerPolicy:
    kind: PolicyKind
    chunk_size: int = 256
    tile_adjust: bool = True

    def __post_init__(self) -> None:
        if self.kind is PolicyKind.DECODE_MAXIMAL and self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")

    @classmethod
    def request_level(cls) -> "SchedulerPolicy":
        return cls(PolicyKind.REQUEST_LEVEL)

    @classmethod
    def orca_best(cls) -> "SchedulerPolicy":
        return cls(PolicyKind.ORCA_BEST)

    @classmethod
    def orca_worst(cls) -> "SchedulerPolicy":
        return cls(PolicyKind.ORCA_WORST)

    @classmethod
    def decode_maximal(cls, chunk_size: int = 256, tile_adjust: bool = True) -> "SchedulerPolicy":
        return cls(PolicyKind.DECODE_MAXIMAL, chunk_size, tile_adjust)

    @property
    def name(self) -> str:
        return self.kind.value


@dataclass(frozen=True)
class BatchPlan:
    composition: BatchComposition
    prefill_ids: Tuple[int, ...]
    decode_ids: Tuple[int, ...]
    iteration: int

    @property
    def request_ids(self) -> Tuple[int, ...]:
        return self.prefill_ids + self.decode_ids


def _decode_item(r: Request) -> DecodeItem:
    # KV attended by the new token: prompt, earlier outputs, and itself
    return DecodeItem(r.prefill_len + r.decode_done + 1)


class Scheduler:
    """Stateful batch builder for one replica.

    ``next_batch`` sees every unfinished request that has arrived; ``busy``
    holds ids already inside an in-flight micro-batch, which are skipped.
    Admission is FCFS and lazy: a request is admitted (and reserves its
    L-token KV footprint) when it is first scheduled.

    ``batch_size`` bounds one batch. ``max_admitted`` bounds the requests
    holding KV at once; a pipeline keeps several micro-batches in flight, so
    it admits up to ``pp * batch_size`` (still subject to ``capacity``).
    """

    def __init__(self, policy: SchedulerPolicy, batch_size: int, tile_size: int = 1,
                 capacity: Optional[CapacityModel] = None, max_admitted: Optional[int] = None):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if max_admitted is not None and max_admitted < batch_size:
            raise ValueError("max_admitted must be >= batch_size")
        self.policy = policy
        self.batch_size = batch_size
        self.max_admitted = max_admitted or batch_size
        self.tile_size = tile_size
        self.capacity = capacity
        self.admitted: Dict[int, Request] = {}
        self.iteration = 0
        self._cohort: List[int] = []
        self.chunk_size = policy.chunk_size
        if policy.kind is PolicyKind.DECODE_MAXIMAL and policy.tile_adjust and batch_size > 1:
            self.chunk_size = advise_chunk_size(policy.chunk_size, batch_size, tile_size)

    # -- bookkeeping ---------------------------------------------------------

    def _release_finished(self) -> None:
        for rid in [rid for rid, r in self.admitted.items() if r.finished]:
            del self.admitted[rid]

    def _room(self) -> bool:
        if len(self.admitted) >= self.max_admitted:
            return False
        return self.capacity is None or can_admit(len(self.admitted), self.capacity)

    def _admit(self, r: Request) -> None:
        if self.capacity is not None and r.seq_len > self.capacity.max_seq_len:
            raise ValueError(
                f"request {r.id} needs {r.seq_len} tokens > capacity L={self.capacity.max_seq_len}")
        self.admitted[r.id] = r

    def _emit(self, prefill: Sequence[Tuple[Request, int]], decode: Sequence[Request]) -> Optional[BatchPlan]:
        if not prefill and not decode:
            return None
        comp = BatchComposition(
            tuple(PrefillItem(n, r.prefill_done) for r, n in prefill),
            tuple(_decode_item(r) for r in decode))
        plan = BatchPlan(comp, tuple(r.id for r, _ in prefill), tuple(r.id for r in decode),
                         self.iteration)
        self.iteration += 1
        return plan

    # -- policies ------------------------------------------------------------

    def next_batch(self, requests: Iterable[Request], clock: float,
                   busy: Collection[int] = ()) -> Optional[BatchPlan]:
        self._release_finished()
        arrived = sorted((r for r in requests
                          if r.arrival_time <= clock and not r.finished),
                         key=lambda r: (r.arrival_time, r.id))
        waiting = [r for r in arrived if r.id not in self.admitted]
        kind = self.policy.kind
        if kind is PolicyKind.REQUEST_LEVEL:
            return self._request_level(waiting, busy)
        if kind is PolicyKind.ORCA_WORST:
            return self._orca_worst(waiting, busy)
        if kind is PolicyKind.ORCA_BEST:
            return self._orca_best(waiting, busy)
        return self._decode_maximal(waiting, busy)

    def _eligible(self, busy: Collection[int]) -> List[Request]:
        rs = [r for r in self.admitted.values() if r.id not in busy]
        return sorted(rs, key=lambda r: (r.arrival_time, r.id))

    def _request_level(self, waiting: List[Request], busy) -> Optional[BatchPlan]:
        self._cohort = [rid for rid in self._cohort if rid in self.admitted]
        if not self._cohort:
            for r in waiting:
                if not self._room():
                    break
                self._admit(r)
                self._cohort.append(r.id)
        members = [r for r in self._eligible(busy) if r.id in self._cohort]
        return self._phase_separated(members)

    def _phase_separated(self, members: List[Request]) -> Optional[BatchPlan]:
        # full prompts first, decodes only once no member has prefill left
        b = self.batch_size
        prefill = [(r, r.prefill_remaining) for r in members if r.prefill_remaining][:b]
        if prefill:
            return self._emit(prefill, [])
        return self._emit([], [r for r in members if r.in_decode][:b])

    def _orca_worst(self, waiting: List[Request], busy) -> Optional[BatchPlan]:
        for r in waiting:
            if not self._room():
                break
            self._admit(r)
        return self._phase_separated(self._eligible(busy))

    def _orca_best(self, waiting: List[Request], busy) -> Optional[BatchPlan]:
        eligible = self._eligible(busy)
        pending = [r for r in eligible if r.prefill_remaining]
        if not pending and waiting and self._room():
            self._admit(waiting[0])
            pending = [waiting[0]]
        prefill = [(pending[0], pending[0].prefill_remaining)] if pending else []
        slots = self.batch_size - len(prefill)
        decode = [r for r in eligible if r.in_decode][:slots]
        return self._emit(prefill, decode)

    def _decode_maximal(self, waiting: List[Request], busy) -> Optional[BatchPlan]:
        eligible = self._eligible(busy)
        pending = [r for r in eligible if r.prefill_remaining]
        if not pending and waiting and self._room():
            self._admit(waiting[0])
            pending = [waiting[0]]
        prefill = []
        if pending:
            r = pending[0]
            prefill = [(r, min(self.chunk_size, r.prefill_remaining))]
        slots = self.batch_size - len(prefill)
        decode = [r for r in eligible if r.in_decode][:slots]
        return self._emit(prefill, decode)


def next_batch(policy: SchedulerPolicy, requests: Iterable[Request], batch_size: int,
               clock: float, tile_size: int = 1) -> Optional[BatchPlan]:
    """One-shot batch for a fresh scheduler; requests already in progress count as admitted."""
    sched = Scheduler(policy, batch_size, tile_size)
    reqs = list(requests)
    for r in sorted(reqs, key=lambda r: (r.arrival_time, r.id)):
        if (r.prefill_done or r.decode_done) and not r.finished and r.arrival_time <= clock:
            sched.admitted[r.id] = r
    return sched.next_batch(reqs, clock)
