"""Deterministic discrete-event simulation of one replica, with or without
pipeline parallelism, plus pipeline-bubble accounting."""

from __future__ import annotations

import enum
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .core import Deployment, Request
from .costmodel import BatchComposition
from .sched import BatchPlan, CapacityModel, Scheduler, SchedulerPolicy, kv_occupancy


# --- communication --------------------------------------------------------------

def tp_allreduce(nbytes: float, tp: int, bandwidth: float, latency: float) -> float:
    """Ring all-reduce time; zero when there is nothing to reduce across."""
    if tp <= 1 or nbytes <= 0:
        return 0.0
    return 2 * (tp - 1) / tp * nbytes / bandwidth + latency


def pp_send(nbytes: float, bandwidth: float, latency: float) -> float:
    if nbytes <= 0:
        return 0.0
    return nbytes / bandwidth + latency


@dataclass(frozen=True)
class CommModel:
    intra_node_bw: float
    inter_node_bw: float
    latency: float

    @classmethod
    def for_deployment(cls, dep: Deployment) -> "CommModel":
        c = dep.cluster
        return cls(c.intra_node_bw, c.inter_node_bw, c.link_latency)

    @classmethod
    def free(cls) -> "CommModel":
        return cls(float("inf"), float("inf"), 0.0)

    def tp_allreduce(self, nbytes: float, tp: int) -> float:
        return tp_allreduce(nbytes, tp, self.intra_node_bw, self.latency)

    def pp_send(self, nbytes: float) -> float:
        return pp_send(nbytes, self.inter_node_bw, self.latency)


# --- trace records --------------------------------------------------------------

@dataclass(frozen=True)
class StageRun:
    """One micro-batch on one stage."""

    stage: int
    microbatch: int
    start: float
    end: float


@dataclass(frozen=True)
class IterationRecord:
    index: int
    plan: BatchPlan
    start: float          # entry into stage 0
    end: float            # exit from the last stage
    stage_time: float     # compute + TP comm on one stage
    prefill_only_time: Optional[float]  # same batch with decodes removed (mixed batches only)
    # set when the scheduler sat idle for lack of eligible work before forming
    # this batch: "refill" while requests were still to be admitted, else "drain"
    starved: Optional[str] = None


GAP_EPSILON = 1e-12


@dataclass
class StageTimeline:
    stage: int
    intervals: List[Tuple[float, float, int]] = field(default_factory=list)

    def add(self, start: float, end: float, mb: int) -> None:
        if end <= start:
            raise ValueError("interval must have end > start")
        if self.intervals and start < self.intervals[-1][1]:
            raise ValueError(f"stage {self.stage}: overlapping intervals")
        self.intervals.append((start, end, mb))

    @property
    def busy(self) -> float:
        return sum(e - s for s, e, _ in self.intervals)

    def gaps(self, makespan: float) -> List[Tuple[float, Optional[int], Optional[int]]]:
        """(gap, preceding mb, following mb) including leading and trailing idle.

        Gaps under a picosecond are float rounding in summed times and dropped.
        """
        out = []
        prev_end, prev_mb = 0.0, None
        for s, e, mb in self.intervals:
            if s - prev_end > GAP_EPSILON:
                out.append((s - prev_end, prev_mb, mb))
            prev_end, prev_mb = e, mb
        if makespan - prev_end > GAP_EPSILON:
            out.append((makespan - prev_end, prev_mb, None))
        return out


class BubbleClass(enum.Enum):
    PB1 = "PB1"
    PB2 = "PB2"
    PB3 = "PB3"
    STARTUP = "Startup"
    DRAIN = "Drain"


PB_CLASSES = (BubbleClass.PB1, BubbleClass.PB2, BubbleClass.PB3)


@dataclass(frozen=True)
class BubbleRecord:
    stage: int
    gap: float
    preceding: Optional[int]
    following: Optional[int]
    classification: BubbleClass


def classify_bubble(preceding: Optional[BatchComposition],
                    following: Optional[BatchComposition]) -> BubbleClass:
    """Name the cause of an idle gap from its two neighbouring micro-batches.

    Every interior gap gets a PB class: differing prefill sizes (PB1), a
    prefill-carrying batch next to a decode-only one (PB2), otherwise a decode
    difference (PB3).
    """
    if preceding is None:
        return BubbleClass.STARTUP
    if following is None:
        return BubbleClass.DRAIN
    a, b = preceding.prefill_tokens, following.prefill_tokens
    if a and b:
        return BubbleClass.PB1 if a != b else BubbleClass.PB3
    if a or b:
        return BubbleClass.PB2
    return BubbleClass.PB3


@dataclass
class SimulationTrace:
    policy: str
    num_stages: int
    iterations: List[IterationRecord]
    stage_runs: List[StageRun]
    requests: List[Request]
    makespan: float
    max_kv_occupancy: float = 0.0

    def timelines(self) -> List[StageTimeline]:
        tls = [StageTimeline(s) for s in range(self.num_stages)]
        for run in sorted(self.stage_runs, key=lambda r: (r.stage, r.start)):
            tls[run.stage].add(run.start, run.end, run.microbatch)
        return tls

    def bubbles(self) -> List[BubbleRecord]:
        """Idle gaps on every stage.

        A gap before a micro-batch the scheduler could not form earlier (no
        eligible work) is a fill or drain effect, not imbalance, and is
        labelled Startup or Drain; other gaps go through ``classify_bubble``.
        """
        its = {it.index: it for it in self.iterations}
        out = []
        for tl in self.timelines():
            for gap, prev_mb, next_mb in tl.gaps(self.makespan):
                nxt = its[next_mb] if next_mb is not None else None
                if nxt is not None and nxt.starved is not None and prev_mb is not None:
                    cls = BubbleClass.DRAIN if nxt.starved == "drain" else BubbleClass.STARTUP
                else:
                    cls = classify_bubble(
                        its[prev_mb].plan.composition if prev_mb is not None else None,
                        nxt.plan.composition if nxt is not None else None)
                out.append(BubbleRecord(tl.stage, gap, prev_mb, next_mb, cls))
        return out

    def to_jsonl(self) -> str:
        """One JSON record per (stage, micro-batch)."""
        its = {it.index: it for it in self.iterations}
        lines = []
        for run in sorted(self.stage_runs, key=lambda r: (r.microbatch, r.stage)):
            it = its[run.microbatch]
            comp = it.plan.composition
            lines.append(json.dumps({
                "stage": run.stage,
                "microbatch": run.microbatch,
                "start": run.start,
                "end": run.end,
                "prefill": [[rid, p.chunk_len, p.context_offset]
                            for rid, p in zip(it.plan.prefill_ids, comp.prefill_items)],
                "decode": [[rid, d.context_len]
                           for rid, d in zip(it.plan.decode_ids, comp.decode_items)],
                "stage_time": it.stage_time,
                "prefill_only_time": it.prefill_only_time,
                "starved": it.starved,
            }, separators=(",", ":")))
        return "\n".join(lines) + "\n"


def per_request_bubble(trace: SimulationTrace, rule: str = "full") -> Dict[int, float]:
    """Pipeline-bubble seconds charged to each request.

    Each PB gap is charged to the requests of the micro-batch that follows it:
    in full to each member (``rule="full"``) or split evenly (``"fractional"``).
    Startup and drain idle are not charged.
    """
    if rule not in ("full", "fractional"):
        raise ValueError(f"unknown attribution rule {rule!r}")
    members = {it.index: it.plan.request_ids for it in trace.iterations}
    totals = {r.id: 0.0 for r in trace.requests}
    for b in trace.bubbles():
        if b.classification not in PB_CLASSES:
            continue
        ids = members[b.following]
        share = b.gap if rule == "full" else b.gap / len(ids)
        for rid in ids:
            totals[rid] += share
    return totals


# --- simulation --------------------------------------------------------------------

class _Clock:
    __slots__ = ("arrivals", "pos")

    def __init__(self, requests: Sequence[Request]):
        self.arrivals = sorted(r.arrival_time for r in requests)
        self.pos = 0

    def next_arrival_after(self, t: float) -> Optional[float]:
        while self.pos < len(self.arrivals) and self.arrivals[self.pos] <= t:
            self.pos += 1
        return self.arrivals[self.pos] if self.pos < len(self.arrivals) else None


def _apply(plan: BatchPlan, by_id: Dict[int, Request], now: float) -> None:
    for rid, item in zip(plan.prefill_ids, plan.composition.prefill_items):
        by_id[rid].advance_prefill(item.chunk_len, now)
    for rid in plan.decode_ids:
        by_id[rid].advance_decode(now)


def _stage_time(comp: BatchComposition, cost, dep: Deployment, comm: CommModel) -> float:
    compute, _ = cost.batch_time(comp, dep.layers_per_stage)
    act_bytes = comp.num_tokens * dep.model.hidden_size * dep.model.bytes_per_param
    return compute + 2 * dep.layers_per_stage * comm.tp_allreduce(act_bytes, dep.tp)


def simulate(requests: Iterable[Request], policy: SchedulerPolicy, cost, deployment: Deployment,
             batch_size: int, capacity: Optional[CapacityModel] = None,
             comm: Optional[CommModel] = None, max_iterations: int = 10_000_000) -> SimulationTrace:
    """Run ``requests`` to completion through a pipeline of ``deployment.pp`` stages.

    A micro-batch is formed whenever stage 0 is free and fewer than ``pp``
    micro-batches are in flight. Its results become visible to the scheduler
    only once it leaves the last stage, and its requests cannot be scheduled
    again until then.

    ``batch_size`` bounds each micro-batch; up to ``pp * batch_size`` requests
    may hold KV at once, further limited by ``capacity``.
    """
    reqs = [r.fresh_copy() for r in requests]
    by_id = {r.id: r for r in reqs}
    if len(by_id) != len(reqs):
        raise ValueError("request ids must be unique")
    comm = comm or CommModel.for_deployment(deployment)
    pp = deployment.pp
    scheduler = Scheduler(policy, batch_size, deployment.cluster.gpu.tile_size, capacity,
                          max_admitted=batch_size * pp)
    clock = _Clock(reqs)

    stage_free = [0.0] * pp
    inflight: deque = deque()      # (exit_time, plan), exit times nondecreasing
    busy: Dict[int, int] = {}
    iterations: List[IterationRecord] = []
    runs: List[StageRun] = []
    unfinished = {r.id for r in reqs}
    max_occ = 0.0
    t = 0.0
    send_cache: Dict[int, float] = {}
    idled = False

    def retire(upto: float) -> None:
        while inflight and inflight[0][0] <= upto:
            exit_time, plan = inflight.popleft()
            _apply(plan, by_id, exit_time)
            for rid in plan.request_ids:
                busy.pop(rid, None)
                if by_id[rid].finished:
                    unfinished.discard(rid)

    while unfinished:
        if len(iterations) >= max_iterations:
            raise RuntimeError("iteration limit reached; scheduler made no progress")
        t = max(t, stage_free[0])
        if len(inflight) >= pp:
            t = max(t, inflight[0][0])
        retire(t)
        if not unfinished:
            break
        active = [by_id[rid] for rid in unfinished]
        plan = scheduler.next_batch(active, t, busy)
        if plan is None:
            nxt = [x for x in (inflight[0][0] if inflight else None, clock.next_arrival_after(t))
                   if x is not None]
            if not nxt:
                raise RuntimeError("simulation stalled with unfinished requests")
            t = min(nxt)
            idled = True
            continue
        starved = None
        if idled:
            starved = "drain" if len(unfinished) == len(scheduler.admitted) else "refill"
            idled = False
        if capacity is not None:
            max_occ = max(max_occ, kv_occupancy(scheduler.admitted.values(), capacity))

        comp = plan.composition
        d = _stage_time(comp, cost, deployment, comm)
        if d <= 0:
            raise ValueError("cost backend returned a non-positive batch time")
        po = None
        if comp.prefill_items and comp.decode_items:
            po = _stage_time(comp.without_decodes(), cost, deployment, comm)
        n = comp.num_tokens
        if n not in send_cache:
            send_cache[n] = comm.pp_send(n * deployment.model.hidden_size
                                         * deployment.model.bytes_per_param)
        send = send_cache[n]

        start = t
        ready = t
        for s in range(pp):
            begin = max(stage_free[s], ready) if s else start
            end = begin + d
            runs.append(StageRun(s, plan.iteration, begin, end))
            stage_free[s] = end
            ready = end + send
        exit_time = stage_free[pp - 1]
        iterations.append(IterationRecord(plan.iteration, plan, start, exit_time, d, po,
                                          starved))
        inflight.append((exit_time, plan))
        for rid in plan.request_ids:
            busy[rid] = plan.iteration

    makespan = max((it.end for it in iterations), default=0.0)
    return SimulationTrace(policy.name, pp, iterations, runs, reqs, makespan, max_occ)


def run_replica(requests: Iterable[Request], policy: SchedulerPolicy, cost,
                deployment: Deployment, batch_size: int,
                capacity: Optional[CapacityModel] = None,
                comm: Optional[CommModel] = None) -> SimulationTrace:
    if deployment.pp != 1:
        raise ValueError("run_replica expects pp=1; use run_pipeline")
    return simulate(requests, policy, cost, deployment, batch_size, capacity, comm)


def run_pipeline(requests: Iterable[Request], policy: SchedulerPolicy, cost,
                 deployment: Deployment, batch_size: int,
                 capacity: Optional[CapacityModel] = None,
                 comm: Optional[CommModel] = None) -> SimulationTrace:
    if deployment.pp < 2:
        raise ValueError("run_pipeline expects pp >= 2; use run_replica")
    return simulate(requests, policy, cost, deployment, batch_size, capacity, comm)
