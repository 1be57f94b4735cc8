"""Metrics over simulation traces and the files a run emits."""

from __future__ import annotations

import csv
import json
import math
import os
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .core import Request
from .costmodel import BatchComposition, DecodeItem, PrefillItem
from .engine import (BubbleClass, IterationRecord, SimulationTrace, StageRun,
                     per_request_bubble)
from .sched import BatchPlan


class WorkloadMismatch(ValueError):
    pass


def marginal_decode_time(mixed_time: float, prefill_only_time: float, num_decodes: int) -> float:
    """Extra time per piggybacked decode token: (mixed - prefill_only) / d."""
    if num_decodes < 1:
        raise ValueError("num_decodes must be >= 1")
    if mixed_time < prefill_only_time:
        raise ValueError(
            f"mixed batch time {mixed_time} is below its prefill-only time {prefill_only_time}")
    return (mixed_time - prefill_only_time) / num_decodes


def percentile(values: Sequence[float], p: float) -> float:
    """Linear-interpolated percentile, p in [0, 100]."""
    if not len(values):
        raise ValueError("percentile of empty sequence")
    if not 0 <= p <= 100:
        raise ValueError("p must lie in [0, 100]")
    xs = sorted(values)
    pos = (len(xs) - 1) * p / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(xs) - 1)
    frac = pos - lo
    return xs[lo] + (xs[hi] - xs[lo]) * frac


@dataclass(frozen=True)
class BreakdownRow:
    scheme: str
    linear: float
    attn: float
    total: float
    per_token_prefill: Optional[float]
    per_token_decode: Optional[float]


def batching_breakdown(cost, prefill_only: BatchComposition, decode_only: BatchComposition,
                       mixed: BatchComposition) -> List[BreakdownRow]:
    """Linear/attention split and per-token times for the three batching schemes.

    The mixed batch's decode cost is its marginal time over ``prefill_only``.
    """
    from .costmodel import LINEAR_OPS, OpKind

    def split(comp):
        total, per_op = cost.batch_time(comp)
        return sum(per_op[k] for k in LINEAR_OPS), per_op[OpKind.ATTN], total

    p_lin, p_att, p_tot = split(prefill_only)
    d_lin, d_att, d_tot = split(decode_only)
    m_lin, m_att, m_tot = split(mixed)
    per_prefill = p_tot / prefill_only.prefill_tokens
    return [
        BreakdownRow("prefill-only", p_lin, p_att, p_tot, per_prefill, None),
        BreakdownRow("decode-only", d_lin, d_att, d_tot, None, d_tot / decode_only.num_decodes),
        BreakdownRow("decode-maximal", m_lin, m_att, m_tot, per_prefill,
                     marginal_decode_time(m_tot, p_tot, mixed.num_decodes)),
    ]


@dataclass
class MetricsBundle:
    policy: str
    workload_hash: str
    makespan: float
    total_tokens: int
    throughput: float
    per_token_prefill: Optional[float]
    per_token_decode: Optional[float]
    decode_only_per_token: Optional[float]
    piggyback_per_token: Optional[float]
    decode_speedup: Optional[float]
    bubble_rule: str
    bubble_cdf: List[float]
    bubble_by_class: Dict[str, float]
    completion_curve: List[Tuple[int, float]]
    num_iterations: int

    @property
    def median_bubble(self) -> float:
        return percentile(self.bubble_cdf, 50) if self.bubble_cdf else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["completion_curve"] = [list(p) for p in self.completion_curve]
        d["median_bubble"] = self.median_bubble
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsBundle":
        d = dict(d)
        d.pop("median_bubble", None)
        d["completion_curve"] = [tuple(p) for p in d["completion_curve"]]
        return cls(**d)


def _div(a: float, b: float) -> Optional[float]:
    return a / b if b else None


def compute_metrics(trace: Union[SimulationTrace, Sequence[SimulationTrace]],
                    workload_hash: str = "", bubble_rule: str = "full") -> MetricsBundle:
    """Metrics for one trace, or pooled over the traces of independent replicas.

    Pooled runs take the latest replica finish as makespan and sum time and
    tokens per phase before dividing.
    """
    traces = [trace] if isinstance(trace, SimulationTrace) else list(trace)
    if not traces:
        raise ValueError("no traces to measure")
    pre_time = pre_tok = 0.0
    dec_only_time = dec_only_tok = 0.0
    pig_time = pig_tok = 0.0
    bubbles: Dict[int, float] = {}
    by_class = defaultdict(float)
    done: List[float] = []
    total_tokens = 0
    for tr in traces:
        stages = tr.num_stages
        for it in tr.iterations:
            comp = it.plan.composition
            full = it.stage_time * stages
            if comp.prefill_items and comp.decode_items:
                po = it.prefill_only_time * stages
                pre_time += po
                pre_tok += comp.prefill_tokens
                pig_time += full - po
                pig_tok += comp.num_decodes
            elif comp.prefill_items:
                pre_time += full
                pre_tok += comp.prefill_tokens
            else:
                dec_only_time += full
                dec_only_tok += comp.num_decodes
        total_tokens += sum(r.prefill_len + r.decode_len for r in tr.requests)
        if stages > 1:
            bubbles.update(per_request_bubble(tr, bubble_rule))
            for b in tr.bubbles():
                by_class[b.classification.value] += b.gap
        else:
            bubbles.update({r.id: 0.0 for r in tr.requests})
        done.extend(r.completion_time for r in tr.requests if r.completion_time is not None)

    dec_only = _div(dec_only_time, dec_only_tok)
    pig = _div(pig_time, pig_tok)
    per_dec = _div(dec_only_time + pig_time, dec_only_tok + pig_tok)
    speedup = dec_only / pig if dec_only is not None and pig else None
    makespan = max(tr.makespan for tr in traces)
    return MetricsBundle(
        policy=traces[0].policy,
        workload_hash=workload_hash,
        makespan=makespan,
        total_tokens=total_tokens,
        throughput=total_tokens / makespan if makespan > 0 else 0.0,
        per_token_prefill=_div(pre_time, pre_tok),
        per_token_decode=per_dec,
        decode_only_per_token=dec_only,
        piggyback_per_token=pig,
        decode_speedup=speedup,
        bubble_rule=bubble_rule,
        bubble_cdf=sorted(bubbles.values()),
        bubble_by_class={c.value: by_class.get(c.value, 0.0) for c in BubbleClass},
        completion_curve=[(i + 1, t) for i, t in enumerate(sorted(done))],
        num_iterations=sum(len(tr.iterations) for tr in traces),
    )


@dataclass(frozen=True)
class SpeedupReport:
    throughput_ratio: float
    median_bubble_ratio: float
    decode_speedup_ratio: Optional[float]


def _ratio(num: Optional[float], den: Optional[float]) -> Optional[float]:
    if num is None or den is None:
        return None
    if den == 0:
        return 1.0 if num == 0 else math.inf
    return num / den


def compare_runs(baseline: MetricsBundle, candidate: MetricsBundle) -> SpeedupReport:
    """Ratios > 1 mean the candidate is better."""
    if baseline.workload_hash != candidate.workload_hash:
        raise WorkloadMismatch(
            f"runs used different workloads ({baseline.workload_hash} vs {candidate.workload_hash})")
    return SpeedupReport(
        throughput_ratio=_ratio(candidate.throughput, baseline.throughput),
        median_bubble_ratio=_ratio(baseline.median_bubble, candidate.median_bubble),
        decode_speedup_ratio=_ratio(baseline.per_token_decode, candidate.per_token_decode),
    )


# --- persisted traces -----------------------------------------------------------

def load_trace(jsonl: str, requests: Sequence[Request], policy: str = "") -> SimulationTrace:
    """Rebuild a trace from its JSON-lines export by replaying request progress."""
    records = [json.loads(line) for line in jsonl.splitlines() if line.strip()]
    runs = [StageRun(r["stage"], r["microbatch"], r["start"], r["end"]) for r in records]
    num_stages = max(r.stage for r in runs) + 1 if runs else 1
    by_mb: Dict[int, List[dict]] = defaultdict(list)
    for rec in records:
        by_mb[rec["microbatch"]].append(rec)

    reqs = [r.fresh_copy() for r in requests]
    by_id = {r.id: r for r in reqs}
    iterations = []
    for mb in sorted(by_mb):
        recs = sorted(by_mb[mb], key=lambda r: r["stage"])
        first, last = recs[0], recs[-1]
        comp = BatchComposition(
            tuple(PrefillItem(c, s) for _, c, s in first["prefill"]),
            tuple(DecodeItem(ctx) for _, ctx in first["decode"]))
        plan = BatchPlan(comp, tuple(p[0] for p in first["prefill"]),
                         tuple(d[0] for d in first["decode"]), mb)
        iterations.append(IterationRecord(mb, plan, first["start"], last["end"],
                                          first["stage_time"], first["prefill_only_time"],
                                          first.get("starved")))
    for it in sorted(iterations, key=lambda it: (it.end, it.index)):
        for rid, item in zip(it.plan.prefill_ids, it.plan.composition.prefill_items):
            by_id[rid].advance_prefill(item.chunk_len, it.end)
        for rid in it.plan.decode_ids:
            by_id[rid].advance_decode(it.end)
    makespan = max((it.end for it in iterations), default=0.0)
    return SimulationTrace(policy, num_stages, iterations, runs, reqs, makespan)


# --- output files -----------------------------------------------------------------

def bubble_histogram(values: Sequence[float], bins: int = 20) -> dict:
    if not values:
        return {"edges": [], "counts": []}
    lo, hi = min(values), max(values)
    if hi == lo:
        return {"edges": [lo, hi], "counts": [len(values)]}
    width = (hi - lo) / bins
    counts = [0] * bins
    for v in values:
        counts[min(int((v - lo) / width), bins - 1)] += 1
    return {"edges": [lo + i * width for i in range(bins)] + [hi], "counts": counts}


def results_document(config: dict, metrics: MetricsBundle, extra: Optional[dict] = None) -> str:
    doc = {
        "config": config,
        "metrics": metrics.to_dict(),
        "bubble_histogram": bubble_histogram(metrics.bubble_cdf),
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_series_csv(path: str, points: Iterable[Tuple[float, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y"])
        for x, y in points:
            w.writerow([repr(x), repr(y)])


def write_plot_csvs(out_dir: str, run: str, metrics: MetricsBundle) -> List[str]:
    """``<run>_bubble_cdf.csv`` and ``<run>_completion.csv`` (x,y per row)."""
    n = len(metrics.bubble_cdf)
    cdf = [(v, (i + 1) / n) for i, v in enumerate(metrics.bubble_cdf)]
    paths = [os.path.join(out_dir, f"{run}_bubble_cdf.csv"),
             os.path.join(out_dir, f"{run}_completion.csv")]
    write_series_csv(paths[0], cdf)
    write_series_csv(paths[1], [(float(k), t) for k, t in metrics.completion_curve])
    return paths
