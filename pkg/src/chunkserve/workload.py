"""Synthetic request sets: Zipf-distributed lengths split by a P:D ratio."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import PdRatio, Request


@dataclass(frozen=True)
class WorkloadSpec:
    num_requests: int
    min_len: int
    max_len: int
    zipf_theta: float = 0.4
    pd_ratio: PdRatio = PdRatio(10.0)
    arrival: str = "all_at_zero"       # or "poisson"
    arrival_rate: Optional[float] = None
    seed: int = 0
    pd_mode: str = "per_request"       # or "aggregate"
    max_seq_len: Optional[int] = None

    def __post_init__(self) -> None:
        if not isinstance(self.pd_ratio, PdRatio):
            object.__setattr__(self, "pd_ratio", PdRatio(float(self.pd_ratio)))
        if self.num_requests < 1:
            raise ValueError("num_requests must be >= 1")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.max_seq_len is not None and self.max_len > self.max_seq_len:
            raise ValueError(f"max_len {self.max_len} exceeds model max_seq_len {self.max_seq_len}")
        if self.zipf_theta < 0:
            raise ValueError("zipf_theta must be >= 0")
        if self.arrival not in ("all_at_zero", "poisson"):
            raise ValueError(f"unknown arrival process {self.arrival!r}")
        if self.arrival == "poisson" and not (self.arrival_rate and self.arrival_rate > 0):
            raise ValueError("poisson arrivals need a positive arrival_rate")
        if self.pd_mode not in ("per_request", "aggregate"):
            raise ValueError(f"unknown pd_mode {self.pd_mode!r}")


def zipf_weights(min_len: int, max_len: int, theta: float) -> np.ndarray:
    """Normalised probabilities of min_len..max_len; rank k has weight k**-theta."""
    ranks = np.arange(1, max_len - min_len + 2, dtype=np.float64)
    w = ranks ** -theta
    return w / w.sum()


def sample_lengths(spec: WorkloadSpec, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    p = zipf_weights(spec.min_len, spec.max_len, spec.zipf_theta)
    idx = rng.choice(len(p), size=spec.num_requests, p=p)
    return spec.min_len + idx


def split_pd(seq_len: int, ratio) -> Tuple[int, int]:
    """Split a sequence length into (prefill, decode) at the given P:D ratio."""
    r = float(ratio)
    if seq_len < 2:
        raise ValueError("seq_len must be >= 2 to hold a prefill and a decode token")
    if not r > 0:
        raise ValueError("ratio must be positive")
    p = int(math.floor(seq_len * r / (1 + r) + 0.5))
    p = min(max(p, 1), seq_len - 1)
    return p, seq_len - p


def _split_aggregate(lengths: np.ndarray, ratio: float,
                     rng: np.random.Generator) -> List[Tuple[int, int]]:
    # per-request decode share varies, the pool as a whole hits the ratio
    frac = 1.0 / (1.0 + ratio)
    w = rng.uniform(0.0, 2.0, size=len(lengths))
    w *= lengths.sum() / float((lengths * w).sum())
    out = []
    for n, wi in zip(lengths.tolist(), w.tolist()):
        d = int(math.floor(n * frac * wi + 0.5))
        d = min(max(d, 1), n - 1)
        out.append((n - d, d))
    return out


def build_requests(spec: WorkloadSpec) -> List[Request]:
    rng = np.random.default_rng(spec.seed)
    lengths = sample_lengths(spec, rng)
    ratio = float(spec.pd_ratio)
    if spec.pd_mode == "per_request":
        splits = [split_pd(int(n), ratio) for n in lengths]
    else:
        splits = _split_aggregate(lengths, ratio, rng)
    if spec.arrival == "all_at_zero":
        arrivals = [0.0] * spec.num_requests
    else:
        gaps = rng.exponential(1.0 / spec.arrival_rate, size=spec.num_requests)
        arrivals = np.cumsum(gaps).tolist()
    return [Request(i, float(a), p, d) for i, (a, (p, d)) in enumerate(zip(arrivals, splits))]


WORKLOAD_HEADER = ("id", "arrival_s", "prefill", "decode")


def requests_to_csv(requests: Sequence[Request]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(WORKLOAD_HEADER)
    for r in requests:
        w.writerow([r.id, repr(float(r.arrival_time)), r.prefill_len, r.decode_len])
    return buf.getvalue()


def requests_from_csv(text: str) -> List[Request]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != WORKLOAD_HEADER:
        raise ValueError(f"workload CSV must start with header {','.join(WORKLOAD_HEADER)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            out.append(Request(int(row[0]), float(row[1]), int(row[2]), int(row[3])))
        except (ValueError, IndexError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return out


def workload_hash(requests: Sequence[Request]) -> str:
    return hashlib.sha256(requests_to_csv(requests).encode()).hexdigest()[:16]
