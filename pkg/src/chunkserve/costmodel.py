"""Execution-time estimates for batch compositions.

Two backends share one contract, ``batch_time(comp, num_layers) -> (total,
per_op)``:

* :class:`AnalyticalCostModel` - FLOP/byte accounting per transformer op fed
  through a roofline with tile quantization of the token dimension.
* :class:`ProfileCostModel` - measured per-op times from a profile CSV, with a
  least-squares regression for points not present in the table.
"""

from __future__ import annotations

import csv
import enum
import io
import math
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from .core import GpuSpec, ModelSpec


class OpKind(enum.Enum):
    PREPROJ = "preproj"
    ATTN = "attn"
    POSTPROJ = "postproj"
    FFN_LN1 = "ffn_ln1"
    FFN_LN2 = "ffn_ln2"
    OTHERS = "others"


LINEAR_OPS = (OpKind.PREPROJ, OpKind.POSTPROJ, OpKind.FFN_LN1, OpKind.FFN_LN2)
MAIN_OPS = (OpKind.PREPROJ, OpKind.ATTN, OpKind.POSTPROJ, OpKind.FFN_LN1, OpKind.FFN_LN2)
PHASES = ("prefill", "decode", "mixed")
DEFAULT_OTHERS_FRACTION = 0.05


@dataclass(frozen=True)
class PrefillItem:
    chunk_len: int
    context_offset: int = 0

    def __post_init__(self) -> None:
        if self.chunk_len < 1:
            raise ValueError("chunk_len must be >= 1")
        if self.context_offset < 0:
            raise ValueError("context_offset must be >= 0")

    @property
    def kv_len(self) -> int:
        return self.context_offset + self.chunk_len


@dataclass(frozen=True)
class DecodeItem:
    context_len: int

    def __post_init__(self) -> None:
        if self.context_len < 1:
            raise ValueError("context_len must be >= 1")


@dataclass(frozen=True)
class BatchComposition:
    prefill_items: Tuple[PrefillItem, ...] = ()
    decode_items: Tuple[DecodeItem, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "prefill_items", tuple(self.prefill_items))
        object.__setattr__(self, "decode_items", tuple(self.decode_items))

    @classmethod
    def build(cls, prefill: Iterable[Tuple[int, int]] = (),
              decode: Iterable[int] = ()) -> "BatchComposition":
        """Shorthand: ``build([(chunk, offset), ...], [ctx, ...])``."""
        return cls(tuple(PrefillItem(c, s) for c, s in prefill),
                   tuple(DecodeItem(d) for d in decode))

    @property
    def prefill_tokens(self) -> int:
        return sum(p.chunk_len for p in self.prefill_items)

    @property
    def num_decodes(self) -> int:
        return len(self.decode_items)

    @property
    def num_tokens(self) -> int:
        return self.prefill_tokens + self.num_decodes

    @property
    def context_sum(self) -> int:
        return sum(d.context_len for d in self.decode_items)

    @property
    def is_empty(self) -> bool:
        return not self.prefill_items and not self.decode_items

    @property
    def phase(self) -> str:
        if self.prefill_items and self.decode_items:
            return "mixed"
        if self.prefill_items:
            return "prefill"
        if self.decode_items:
            return "decode"
        raise ValueError("empty composition has no phase")

    @property
    def context_key(self) -> int:
        """Mean KV length attended per item, rounded half up (profile lookup key)."""
        lens = [p.kv_len for p in self.prefill_items] + [d.context_len for d in self.decode_items]
        if not lens:
            return 0
        return int(math.floor(sum(lens) / len(lens) + 0.5))

    def without_decodes(self) -> "BatchComposition":
        return BatchComposition(self.prefill_items, ())


@dataclass(frozen=True)
class OpCost:
    flops: float
    bytes: float

    def __post_init__(self) -> None:
        if self.flops < 0 or self.bytes < 0:
            raise ValueError("OpCost fields must be >= 0")

    def __add__(self, other: "OpCost") -> "OpCost":
        return OpCost(self.flops + other.flops, self.bytes + other.bytes)

    @property
    def intensity(self) -> float:
        return self.flops / self.bytes if self.bytes else math.inf


ZERO_COST = OpCost(0.0, 0.0)


def effective_tokens(tokens: int, tile_size: int) -> int:
    """Token count rounded up to the next tile multiple."""
    return -(-tokens // tile_size) * tile_size


def _linear_dims(kind: OpKind, model: ModelSpec, tp: int) -> Tuple[float, float]:
    h, h2 = model.hidden_size, model.ffn_hidden
    if kind is OpKind.PREPROJ:
        return h, 3 * h / tp
    if kind is OpKind.POSTPROJ:
        return h / tp, h
    if kind is OpKind.FFN_LN1:
        return h, h2 / tp
    if kind is OpKind.FFN_LN2:
        return h2 / tp, h
    raise ValueError(f"{kind} is not a linear op")


def _prefill_attn(item: PrefillItem, head_dim: float, bpp: int) -> OpCost:
    c, s = item.chunk_len, item.context_offset
    # sum_{i=1..c} (s + i): causal rows of this chunk against the whole prefix
    key_visits = c * s + c * (c + 1) // 2
    flops = 4 * head_dim * key_visits
    kv_read = (s + c) * 2 * head_dim
    kv_write = c * 2 * head_dim
    q_in, y_out = c * head_dim, c * head_dim
    return OpCost(flops, (kv_read + kv_write + q_in + y_out) * bpp)


def _decode_attn(item: DecodeItem, head_dim: float, bpp: int) -> OpCost:
    flops = 4 * head_dim * item.context_len
    kv_read = item.context_len * 2 * head_dim
    kv_write = 2 * head_dim
    return OpCost(flops, (kv_read + kv_write + 2 * head_dim) * bpp)


def op_cost(kind: OpKind, comp: BatchComposition, model: ModelSpec,
            tp_degree: int = 1, tile_size: int = 1) -> OpCost:
    """Per-layer FLOPs and device-memory bytes of one op, TP-sharded."""
    if kind is OpKind.OTHERS:
        return ZERO_COST
    bpp = model.bytes_per_param
    if kind is OpKind.ATTN:
        head_dim = model.hidden_size / tp_degree
        total = ZERO_COST
        for p in comp.prefill_items:
            total = total + _prefill_attn(p, head_dim, bpp)
        for d in comp.decode_items:
            total = total + _decode_attn(d, head_dim, bpp)
        return total
    if comp.num_tokens == 0:
        return ZERO_COST
    t_eff = effective_tokens(comp.num_tokens, tile_size)
    d_in, d_out = _linear_dims(kind, model, tp_degree)
    flops = 2 * t_eff * d_in * d_out
    nbytes = (d_in * d_out + t_eff * d_in + t_eff * d_out) * bpp
    return OpCost(flops, nbytes)


def attention_kernels(comp: BatchComposition, model: ModelSpec,
                      tp_degree: int = 1) -> List[OpCost]:
    """Attention launches: one per prefill item, one for all decodes together."""
    head_dim = model.hidden_size / tp_degree
    bpp = model.bytes_per_param
    kernels = [_prefill_attn(p, head_dim, bpp) for p in comp.prefill_items]
    if comp.decode_items:
        dec = ZERO_COST
        for d in comp.decode_items:
            dec = dec + _decode_attn(d, head_dim, bpp)
        kernels.append(dec)
    return kernels


def kv_read_bytes(comp: BatchComposition, model: ModelSpec, tp_degree: int = 1) -> float:
    head_dim = model.hidden_size / tp_degree
    tokens = sum(p.kv_len for p in comp.prefill_items) + comp.context_sum
    return tokens * 2 * head_dim * model.bytes_per_param


def arithmetic_intensity(comp: BatchComposition, model: ModelSpec, tp_degree: int = 1) -> float:
    """Useful FLOPs per byte over the five main ops (no tile padding)."""
    total = ZERO_COST
    for kind in MAIN_OPS:
        total = total + op_cost(kind, comp, model, tp_degree, tile_size=1)
    return total.intensity


def roofline_time(cost: OpCost, gpu: GpuSpec) -> float:
    compute = cost.flops / (gpu.peak_flops * gpu.compute_efficiency)
    memory = cost.bytes / (gpu.mem_bandwidth * gpu.memory_efficiency)
    return max(compute, memory) + gpu.kernel_overhead


def batch_time_analytical(comp: BatchComposition, model: ModelSpec, gpu: GpuSpec,
                          tp_degree: int = 1, num_layers: Optional[int] = None,
                          others_fraction: float = DEFAULT_OTHERS_FRACTION,
                          ) -> Tuple[float, Dict[OpKind, float]]:
    """Time of one forward pass of ``comp`` over ``num_layers`` layers.

    Linear ops run once over the fused token count, so weights are fetched once
    for prefill and decode tokens together. Attention is never fused.
    """
    layers = model.num_layers if num_layers is None else num_layers
    per_op: Dict[OpKind, float] = {}
    if comp.is_empty:
        return 0.0, {k: 0.0 for k in OpKind}
    for kind in LINEAR_OPS:
        per_op[kind] = layers * roofline_time(
            op_cost(kind, comp, model, tp_degree, gpu.tile_size), gpu)
    per_op[OpKind.ATTN] = layers * sum(
        roofline_time(k, gpu) for k in attention_kernels(comp, model, tp_degree))
    five = sum(per_op[k] for k in MAIN_OPS)
    per_op[OpKind.OTHERS] = others_fraction * five
    return five + per_op[OpKind.OTHERS], per_op


class AnalyticalCostModel:
    name = "analytical"

    def __init__(self, model: ModelSpec, gpu: GpuSpec, tp_degree: int = 1,
                 others_fraction: float = DEFAULT_OTHERS_FRACTION):
        if not 0 <= others_fraction < 1:
            raise ValueError("others_fraction must lie in [0, 1)")
        self.model = model
        self.gpu = gpu
        self.tp_degree = tp_degree
        self.others_fraction = others_fraction

    def batch_time(self, comp: BatchComposition, num_layers: Optional[int] = None):
        return batch_time_analytical(comp, self.model, self.gpu, self.tp_degree,
                                     num_layers, self.others_fraction)


def tile_penalty_demo(tokens: int, gpu: GpuSpec, model: ModelSpec, tp_degree: int = 1) -> float:
    """Iteration time of a lone prefill of ``tokens`` tokens.

    The linear-op part is a step function of ``tokens``: flat between tile
    multiples, jumping by one tile's worth of FLOPs just past each multiple.
    """
    if tokens < 1:
        raise ValueError("tokens must be >= 1")
    comp = BatchComposition((PrefillItem(tokens, 0),))
    return batch_time_analytical(comp, model, gpu, tp_degree)[0]


# --- profile tables ------------------------------------------------------------

PROFILE_HEADER = ("op", "phase", "tokens", "context", "time_us")


class ProfileFormatError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class InsufficientProfileData(LookupError):
    pass


@dataclass(frozen=True)
class ProfileEntry:
    op: OpKind
    phase: str
    tokens: int
    context: int
    time_us: float

    @property
    def key(self) -> Tuple[OpKind, str, int, int]:
        return (self.op, self.phase, self.tokens, self.context)

    @property
    def time(self) -> float:
        return self.time_us / 1e6


@dataclass(frozen=True)
class ProfileTable:
    entries: Tuple[ProfileEntry, ...]
    _index: Dict = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        index = {}
        for e in self.entries:
            if e.key in index:
                raise ProfileFormatError(f"duplicate key {_fmt_key(e.key)}")
            if not e.time_us > 0:
                raise ProfileFormatError(f"non-positive time for {_fmt_key(e.key)}")
            index[e.key] = e
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.entries)

    def lookup(self, kind: OpKind, phase: str, tokens: int, context: int) -> Optional[ProfileEntry]:
        return self._index.get((kind, phase, tokens, context))

    def points(self, kind: OpKind, phase: str) -> List[ProfileEntry]:
        return [e for e in self.entries if e.op is kind and e.phase == phase]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(PROFILE_HEADER)
        for e in self.entries:
            w.writerow([e.op.value, e.phase, e.tokens, e.context, repr(e.time_us)])
        return buf.getvalue()


def _fmt_key(key) -> str:
    op, phase, tokens, context = key
    return f"({op.value}, {phase}, tokens={tokens}, context={context})"


_PROFILE_OPS = {k.value: k for k in MAIN_OPS}


def ingest_profile(source: Union[str, os.PathLike, io.TextIOBase]) -> ProfileTable:
    """Parse a profile CSV from a path, a file object, or CSV text.

    A ``str`` containing a newline is treated as CSV text; otherwise as a path.
    """
    if hasattr(source, "read"):
        text = source.read()
    elif isinstance(source, str) and "\n" in source:
        text = source
    else:
        with open(source, encoding="utf-8") as fh:
            text = fh.read()

    entries: List[ProfileEntry] = []
    seen = {}
    header_seen = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = next(csv.reader([line]))
        fields = [f.strip() for f in fields]
        if not header_seen:
            if tuple(fields) != PROFILE_HEADER:
                raise ProfileFormatError(
                    f"expected header {','.join(PROFILE_HEADER)!r}, got {line!r}", lineno)
            header_seen = True
            continue
        if len(fields) != 5:
            raise ProfileFormatError(f"expected 5 fields, got {len(fields)}", lineno)
        op_s, phase, tok_s, ctx_s, time_s = fields
        if op_s not in _PROFILE_OPS:
            raise ProfileFormatError(f"unknown op {op_s!r}", lineno)
        if phase not in PHASES:
            raise ProfileFormatError(f"unknown phase {phase!r}", lineno)
        try:
            tokens, context = int(tok_s), int(ctx_s)
        except ValueError:
            raise ProfileFormatError("tokens and context must be integers", lineno) from None
        if tokens < 1 or context < 0:
            raise ProfileFormatError("tokens must be >= 1 and context >= 0", lineno)
        try:
            time_us = float(time_s)
        except ValueError:
            raise ProfileFormatError(f"bad time {time_s!r}", lineno) from None
        if not (time_us > 0 and math.isfinite(time_us)):
            raise ProfileFormatError(f"time must be positive, got {time_s}", lineno)
        entry = ProfileEntry(_PROFILE_OPS[op_s], phase, tokens, context, time_us)
        if entry.key in seen:
            raise ProfileFormatError(
                f"duplicate key {_fmt_key(entry.key)} (first on line {seen[entry.key]})", lineno)
        seen[entry.key] = lineno
        entries.append(entry)
    if not header_seen:
        raise ProfileFormatError("missing header")
    return ProfileTable(tuple(entries))


def _design_row(kind: OpKind, tokens: int, context: int, tile_size: int) -> List[float]:
    if kind is OpKind.ATTN:
        return [1.0, float(tokens), float(tokens) * context]
    return [1.0, float(effective_tokens(tokens, tile_size))]


def fit_profile(table: ProfileTable, kind: OpKind, phase: str, tile_size: int = 1) -> np.ndarray:
    """Least-squares coefficients for one (op, phase) series.

    Linear ops: ``t = a + b*T_eff``. Attention: ``t = a + b*T + c*T*context``.
    Times are in seconds.
    """
    pts = table.points(kind, phase)
    if len(pts) < 2 or len({p.tokens for p in pts}) < 2:
        raise InsufficientProfileData(
            f"need at least 2 distinct token counts for ({kind.value}, {phase}), "
            f"have {len(pts)} rows")
    X = np.array([_design_row(kind, p.tokens, p.context, tile_size) for p in pts])
    y = np.array([p.time for p in pts])
    # column scaling keeps lstsq well conditioned when T*context spans 1e0..1e7
    scale = np.abs(X).max(axis=0)
    scale[scale == 0] = 1.0
    coef, *_ = np.linalg.lstsq(X / scale, y, rcond=None)
    return coef / scale


def profile_time(table: ProfileTable, kind: OpKind, phase: str, tokens: int, context: int,
                 tile_size: int = 1, kernel_overhead: float = 0.0,
                 _coef_cache: Optional[dict] = None) -> float:
    """Exact lookup if the key exists, else the regression prediction (seconds)."""
    hit = table.lookup(kind, phase, tokens, context)
    if hit is not None:
        return hit.time
    ckey = (kind, phase, tile_size)
    if _coef_cache is not None and ckey in _coef_cache:
        coef = _coef_cache[ckey]
    else:
        coef = fit_profile(table, kind, phase, tile_size)
        if _coef_cache is not None:
            _coef_cache[ckey] = coef
    pred = float(np.dot(coef, _design_row(kind, tokens, context, tile_size)))
    return max(pred, kernel_overhead)


class ProfileCostModel:
    """Cost backend over a measured profile table.

    ``profiled_layers`` is the layer count the table was measured on; times are
    rescaled linearly when a stage runs a different number of layers. Leave it
    ``None`` when the table already describes exactly one stage.
    """

    name = "profile"

    def __init__(self, table: ProfileTable, tile_size: int = 1, kernel_overhead: float = 0.0,
                 profiled_layers: Optional[int] = None, others_fraction: float = 0.0):
        self.table = table
        self.tile_size = tile_size
        self.kernel_overhead = kernel_overhead
        self.profiled_layers = profiled_layers
        self.others_fraction = others_fraction
        self._cache: dict = {}

    def op_time(self, kind: OpKind, comp: BatchComposition) -> float:
        context = comp.context_key if kind is OpKind.ATTN else 0
        return profile_time(self.table, kind, comp.phase, comp.num_tokens, context,
                            self.tile_size, self.kernel_overhead, self._cache)

    def batch_time(self, comp: BatchComposition, num_layers: Optional[int] = None):
        if comp.is_empty:
            return 0.0, {k: 0.0 for k in OpKind}
        scale = 1.0
        if num_layers is not None and self.profiled_layers is not None:
            scale = num_layers / self.profiled_layers
        per_op = {k: self.op_time(k, comp) * scale for k in MAIN_OPS}
        five = sum(per_op.values())
        per_op[OpKind.OTHERS] = self.others_fraction * five
        return five + per_op[OpKind.OTHERS], per_op


class ConstantCostModel:
    """Every non-empty batch takes ``duration`` seconds. Used as a control."""

    name = "constant"

    def __init__(self, duration: float):
        if duration <= 0:
            raise ValueError("duration must be positive")
        self.duration = duration

    def batch_time(self, comp: BatchComposition, num_layers: Optional[int] = None):
        if comp.is_empty:
            return 0.0, {k: 0.0 for k in OpKind}
        per_op = {k: 0.0 for k in OpKind}
        per_op[OpKind.OTHERS] = self.duration
        return self.duration, per_op
