"""Prefill chunking: plans, progressive causal masks, KV reload accounting, and a
small exact attention kernel for checking chunked against full prefill."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .core import PdRatio


@dataclass(frozen=True)
class ChunkPlan:
    request_id: Optional[int]
    chunks: Tuple[Tuple[int, int], ...]
    chunk_size: int

    def __post_init__(self) -> None:
        pos = 0
        for i, (start, length) in enumerate(self.chunks):
            if start != pos or length < 1 or length > self.chunk_size:
                raise ValueError(f"chunk {i} = {(start, length)} breaks the tiling")
            if length < self.chunk_size and i != len(self.chunks) - 1:
                raise ValueError("only the last chunk may be shorter than chunk_size")
            pos += length

    @property
    def num_chunks(self) -> int:
        return len(self.chunks)

    @property
    def prefill_len(self) -> int:
        start, length = self.chunks[-1]
        return start + length


def plan_chunks(prefill_len: int, chunk_size: int, request_id: Optional[int] = None) -> ChunkPlan:
    if prefill_len < 1 or chunk_size < 1:
        raise ValueError("prefill_len and chunk_size must be >= 1")
    chunks = tuple((start, min(chunk_size, prefill_len - start))
                   for start in range(0, prefill_len, chunk_size))
    return ChunkPlan(request_id, chunks, chunk_size)


@dataclass(frozen=True)
class ChunkMask:
    """Allowed key range ``[lo, hi]`` (inclusive) per query position."""

    rows: Tuple[Tuple[int, int, int], ...]  # (query, lo, hi)

    def allowed(self, query: int) -> range:
        for q, lo, hi in self.rows:
            if q == query:
                return range(lo, hi + 1)
        raise KeyError(query)

    def to_dense(self, num_keys: int) -> np.ndarray:
        """Boolean matrix of shape (len(rows), num_keys)."""
        dense = np.zeros((len(self.rows), num_keys), dtype=bool)
        for r, (_, lo, hi) in enumerate(self.rows):
            dense[r, lo:hi + 1] = True
        return dense


def mask_for_chunk(plan: ChunkPlan, chunk_index: int) -> ChunkMask:
    if not 0 <= chunk_index < plan.num_chunks:
        raise IndexError(f"chunk_index {chunk_index} out of range for {plan.num_chunks} chunks")
    start, length = plan.chunks[chunk_index]
    return ChunkMask(tuple((q, 0, q) for q in range(start, start + length)))


def kv_reload_tokens(plan: ChunkPlan) -> int:
    """Token-KV reads over all chunks: every chunk rereads the whole prefix."""
    return sum(start + length for start, length in plan.chunks)


def advise_chunk_size(target_chunk: int, batch_size: int, tile_size: int) -> int:
    """Shrink the chunk so chunk + (B-1) piggybacked decodes fills whole tiles."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if target_chunk % tile_size:
        raise ValueError(f"target chunk {target_chunk} is not a multiple of tile {tile_size}")
    if target_chunk <= batch_size - 1:
        raise ValueError(
            f"target chunk {target_chunk} leaves no room for {batch_size - 1} decode slots")
    return target_chunk - (batch_size - 1)


def optimal_pd(chunk_size: int, batch_size: int) -> PdRatio:
    """P:D at which every decode piggybacks on a prefill chunk: C/(B-1)."""
    if batch_size < 2:
        raise ValueError("batch size < 2 leaves no decode slots")
    return PdRatio(chunk_size / (batch_size - 1))


# --- toy exact attention -----------------------------------------------------

@dataclass(frozen=True)
class ToyWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    @property
    def hidden(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def random(cls, hidden: int, rng: np.random.Generator) -> "ToyWeights":
        scale = 1.0 / np.sqrt(hidden)
        return cls(*(rng.standard_normal((hidden, hidden)) * scale for _ in range(4)))

    @classmethod
    def identity(cls, hidden: int) -> "ToyWeights":
        eye = np.eye(hidden)
        return cls(eye, eye, eye, eye)


@dataclass
class ToyAttentionState:
    """Append-only single-head KV store."""

    hidden: int
    keys: np.ndarray = field(init=False)
    values: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.keys = np.empty((0, self.hidden))
        self.values = np.empty((0, self.hidden))

    def __len__(self) -> int:
        return self.keys.shape[0]

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        self.keys = np.vstack([self.keys, k])
        self.values = np.vstack([self.values, v])


def _check_inputs(x: np.ndarray, weights: ToyWeights) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] != weights.hidden:
        raise ValueError(f"x must have shape (P>=1, {weights.hidden}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("x contains non-finite values")
    for w in (weights.wq, weights.wk, weights.wv, weights.wo):
        if not np.all(np.isfinite(w)):
            raise ValueError("weights contain non-finite values")
    return x


def _attend(q: np.ndarray, mask: ChunkMask, state: ToyAttentionState) -> np.ndarray:
    """Masked softmax(q K^T / sqrt(H)) V against the store, one row per query."""
    out = np.empty_like(q)
    inv = 1.0 / np.sqrt(state.hidden)
    for r, (_, lo, hi) in enumerate(mask.rows):
        keys = state.keys[lo:hi + 1]
        scores = keys @ q[r] * inv
        w = np.exp(scores - scores.max())
        out[r] = (w / w.sum()) @ state.values[lo:hi + 1]
    return out


def toy_chunked_prefill(x: np.ndarray, weights: ToyWeights,
                        plan: ChunkPlan) -> Tuple[np.ndarray, ToyAttentionState]:
    x = _check_inputs(x, weights)
    if plan.prefill_len != x.shape[0]:
        raise ValueError(f"plan covers {plan.prefill_len} tokens, x has {x.shape[0]}")
    state = ToyAttentionState(weights.hidden)
    outputs = []
    for idx, (start, length) in enumerate(plan.chunks):
        xc = x[start:start + length]
        state.append(xc @ weights.wk, xc @ weights.wv)
        y = _attend(xc @ weights.wq, mask_for_chunk(plan, idx), state)
        outputs.append(y @ weights.wo)
    return np.vstack(outputs), state


def toy_full_prefill(x: np.ndarray, weights: ToyWeights) -> Tuple[np.ndarray, ToyAttentionState]:
    """Whole prompt in one pass with a plain causal mask."""
    x = _check_inputs(x, weights)
    return toy_chunked_prefill(x, weights, plan_chunks(x.shape[0], x.shape[0]))


def max_deviation(prefill_len: int, chunk_size: int, hidden: int, seed: int) -> float:
    """Max-abs difference between chunked and full prefill (outputs and KV)."""
    rng = np.random.default_rng(seed)
    weights = ToyWeights.random(hidden, rng)
    x = rng.standard_normal((prefill_len, hidden))
    full, full_kv = toy_full_prefill(x, weights)
    chunked, chunked_kv = toy_chunked_prefill(x, weights, plan_chunks(prefill_len, chunk_size))
    return float(max(np.max(np.abs(full - chunked)),
                     np.max(np.abs(full_kv.keys - chunked_kv.keys)),
                     np.max(np.abs(full_kv.values - chunked_kv.values))))
