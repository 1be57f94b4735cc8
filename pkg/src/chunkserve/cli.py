"""Experiment harness: INI-style configs, single runs, sweeps and small utilities.

Config grammar: ``[section]`` headers followed by ``key = value`` lines; ``#``
starts a comment line. Sections are ``model``, ``gpu``, ``cluster``,
``policy``, ``cost``, ``workload``, ``run``, ``sweep`` and ``output``. A
``model`` or ``gpu`` section may name a bundled preset (``preset = llama-13b``)
and override single fields, or spell out every field inline.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

from . import __version__
from .chunker import advise_chunk_size, max_deviation, optimal_pd
from .core import (ClusterSpec, DeploymentError, GpuSpec, ModelSpec, PdRatio, Request,
                   gpu_from_section, gpu_preset, model_from_section, model_preset,
                   validate_deployment)
from .costmodel import (MAIN_OPS, AnalyticalCostModel, BatchComposition,
                        InsufficientProfileData, ProfileCostModel, ProfileFormatError,
                        fit_profile, ingest_profile, PHASES)
from .engine import CommModel, simulate
from .report import compare_runs, compute_metrics, results_document, write_plot_csvs
from .sched import (CALIBRATED_RESERVE_FRACTION, CapacityModel, PolicyKind, SchedulerPolicy,
                    max_batch_size, pipeline_batch_size)
from .workload import WorkloadSpec, build_requests, requests_from_csv, workload_hash

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_CONFIG = 2

SWEEP_AXES = ("pd_ratio", "chunk_size", "batch_size")
COST_BACKENDS = ("analytical", "profile")
BUBBLE_RULES = ("full", "fractional")


class ConfigError(ValueError):
    """Invalid or unreadable experiment config; carries where it went wrong."""

    def __init__(self, message: str, path: Optional[str] = None, section: Optional[str] = None,
                 key: Optional[str] = None):
        where = []
        if path:
            where.append(path)
        if section:
            where.append(f"[{section}]" + (f" {key}" if key else ""))
        self.path, self.section, self.key = path, section, key
        super().__init__(": ".join(where + [message]))


@dataclass(frozen=True)
class CostConfig:
    backend: str = "analytical"
    path: Optional[str] = None
    profiled_layers: Optional[int] = None
    others_fraction: float = 0.05

    def __post_init__(self) -> None:
        if self.backend not in COST_BACKENDS:
            raise ValueError(f"backend must be one of {COST_BACKENDS}")
        if self.backend == "profile" and not self.path:
            raise ValueError("profile backend needs a path")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    batch_size: Optional[int] = None          # None: derived from KV capacity
    reserve_fraction: float = CALIBRATED_RESERVE_FRACTION
    max_seq_len: Optional[int] = None         # L for admission; None: workload max_len
    bubble_rule: str = "full"
    baseline: Optional[str] = None            # policy name to compare against

    def __post_init__(self) -> None:
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.bubble_rule not in BUBBLE_RULES:
            raise ValueError(f"bubble_rule must be one of {BUBBLE_RULES}")
        if self.baseline is not None:
            PolicyKind(self.baseline)


@dataclass(frozen=True)
class SweepConfig:
    axis: str
    values: Tuple[float, ...]

    def __post_init__(self) -> None:
        if self.axis not in SWEEP_AXES:
            raise ValueError(f"axis must be one of {SWEEP_AXES}")
        if not self.values:
            raise ValueError("sweep needs at least one value")
        for v in self.values:
            if self.axis == "pd_ratio":
                if not v > 0:
                    raise ValueError(f"pd_ratio values must be positive, got {v}")
            elif v != int(v) or v < 1:
                raise ValueError(f"{self.axis} values must be positive integers, got {v}")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec
    gpu: GpuSpec
    workload: WorkloadSpec
    model_preset: Optional[str] = None
    gpu_preset: Optional[str] = None
    tp_degree: int = 1
    pp_degree: int = 1
    num_replicas: int = 1
    intra_node_bw: float = 300e9
    inter_node_bw: float = 25e9
    link_latency: float = 5e-6
    policy: SchedulerPolicy = SchedulerPolicy.decode_maximal()
    cost: CostConfig = CostConfig()
    run: RunConfig = RunConfig()
    sweep: Optional[SweepConfig] = None
    workload_csv: Optional[str] = None
    out_dir: str = "results"
    name: str = "run"
    write_trace: bool = False

    def __post_init__(self) -> None:
        self.cluster  # validates the degrees

    @property
    def cluster(self) -> ClusterSpec:
        return ClusterSpec(self.gpu, self.tp_degree, self.pp_degree, self.num_replicas,
                           self.intra_node_bw, self.inter_node_bw, self.link_latency)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, run=dataclasses.replace(self.run, seed=seed),
                                   workload=dataclasses.replace(self.workload, seed=seed))

    def at_sweep_point(self, value: float) -> "ExperimentConfig":
        """Config for one sweep point, with the sweep section removed."""
        if self.sweep is None:
            raise ValueError("config has no sweep")
        axis = self.sweep.axis
        cfg = dataclasses.replace(self, sweep=None, name=f"{self.name}_{axis}-{_fmt_num(value)}")
        if axis == "pd_ratio":
            return dataclasses.replace(cfg, workload=dataclasses.replace(
                self.workload, pd_ratio=PdRatio(float(value))))
        if axis == "chunk_size":
            return dataclasses.replace(cfg, policy=dataclasses.replace(
                self.policy, chunk_size=int(value)))
        return dataclasses.replace(cfg, run=dataclasses.replace(self.run, batch_size=int(value)))

    def to_dict(self) -> dict:
        """Resolved config, as echoed into results documents."""
        parser = _to_parser(self)
        return {s: dict(parser[s]) for s in parser.sections()}


def _fmt_num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


# --- parsing -------------------------------------------------------------------

_MODEL_FIELDS = [f.name for f in dataclasses.fields(ModelSpec)]
_GPU_FIELDS = [f.name for f in dataclasses.fields(GpuSpec)]


class _Reader:
    """Typed access to one parsed section, with errors that name section and key."""

    def __init__(self, parser: configparser.ConfigParser, section: str, path: Optional[str]):
        self.sec = parser[section] if parser.has_section(section) else {}
        self.section = section
        self.path = path
        self.used = set()

    def _err(self, key: str, msg: str) -> ConfigError:
        return ConfigError(msg, self.path, self.section, key)

    def get(self, key: str, conv=str, default=None, required: bool = False):
        self.used.add(key)
        if key not in self.sec or self.sec[key].strip() == "":
            if required:
                raise self._err(key, "missing required key")
            return default
        raw = self.sec[key].strip()
        try:
            return conv(raw)
        except (ValueError, TypeError) as exc:
            raise self._err(key, f"bad value {raw!r}: {exc}") from None

    def check_unknown(self, allowed: Sequence[str]) -> None:
        for key in self.sec:
            if key not in allowed:
                raise self._err(key, "unknown key")


def _bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true or false")


def _float_list(raw: str) -> Tuple[float, ...]:
    return tuple(float(x) for x in raw.replace(",", " ").split())


def _spec_section(parser, section, fields, preset_fn, from_section, path):
    rd = _Reader(parser, section, path)
    rd.check_unknown(["preset"] + fields)
    preset = rd.get("preset")
    try:
        if preset:
            base = preset_fn(preset)
            overrides = {k: rd.sec[k] for k in fields if k in rd.sec}
            if not overrides:
                return base, preset
            merged = {k: repr(v) if isinstance(v, float) else str(v)
                      for k, v in dataclasses.asdict(base).items()}
            merged.update(overrides)
            spec = from_section(merged)
            return spec, (preset if spec == base else None)
        if not rd.sec:
            raise ConfigError("section missing: give a preset or inline fields", path, section)
        return from_section(rd.sec), None
    except KeyError as exc:
        raise ConfigError(f"missing or unknown entry {exc}", path, section) from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), path, section) from None


def parse_config(text: str, path: Optional[str] = None, check_files: bool = True) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=path or "<config>")
    except configparser.Error as exc:
        raise ConfigError(f"syntax error: {exc}", path) from None
    known = {"model", "gpu", "cluster", "policy", "cost", "workload", "run", "sweep", "output"}
    for s in parser.sections():
        if s not in known:
            raise ConfigError("unknown section", path, s)
    base_dir = os.path.dirname(os.path.abspath(path)) if path else os.getcwd()

    def resolve(p: Optional[str]) -> Optional[str]:
        return p if p is None or os.path.isabs(p) else os.path.normpath(os.path.join(base_dir, p))

    model, mpreset = _spec_section(parser, "model", _MODEL_FIELDS, model_preset,
                                   model_from_section, path)
    gpu, gpreset = _spec_section(parser, "gpu", _GPU_FIELDS, gpu_preset, gpu_from_section, path)

    cl = _Reader(parser, "cluster", path)
    cl.check_unknown(["tp_degree", "pp_degree", "num_replicas", "intra_node_bw",
                      "inter_node_bw", "link_latency"])
    cluster = dict(
        tp_degree=cl.get("tp_degree", int, 1), pp_degree=cl.get("pp_degree", int, 1),
        num_replicas=cl.get("num_replicas", int, 1),
        intra_node_bw=cl.get("intra_node_bw", float, 300e9),
        inter_node_bw=cl.get("inter_node_bw", float, 25e9),
        link_latency=cl.get("link_latency", float, 5e-6))
    try:
        validate_deployment(model, ClusterSpec(gpu, cluster["tp_degree"], cluster["pp_degree"],
                                               cluster["num_replicas"]))
    except (DeploymentError, ValueError) as exc:
        raise ConfigError(str(exc), path, "cluster") from None

    po = _Reader(parser, "policy", path)
    po.check_unknown(["name", "chunk_size", "tile_adjust"])
    try:
        policy = SchedulerPolicy(PolicyKind(po.get("name", str, "decode_maximal")),
                                 po.get("chunk_size", int, 256), po.get("tile_adjust", _bool, True))
    except ValueError as exc:
        raise ConfigError(str(exc), path, "policy") from None

    co = _Reader(parser, "cost", path)
    co.check_unknown(["backend", "path", "profiled_layers", "others_fraction"])
    try:
        cost = CostConfig(co.get("backend", str, "analytical"), resolve(co.get("path")),
                          co.get("profiled_layers", int), co.get("others_fraction", float, 0.05))
    except ValueError as exc:
        raise ConfigError(str(exc), path, "cost") from None
    if check_files and cost.path and not os.path.isfile(cost.path):
        raise ConfigError(f"profile CSV not found: {cost.path}", path, "cost", "path")

    rn = _Reader(parser, "run", path)
    rn.check_unknown(["seed", "batch_size", "reserve_fraction", "max_seq_len", "bubble_rule",
                      "baseline"])
    try:
        run = RunConfig(rn.get("seed", int, 0), rn.get("batch_size", int),
                        rn.get("reserve_fraction", float, CALIBRATED_RESERVE_FRACTION),
                        rn.get("max_seq_len", int), rn.get("bubble_rule", str, "full"),
                        rn.get("baseline"))
    except ValueError as exc:
        raise ConfigError(str(exc), path, "run") from None

    wl = _Reader(parser, "workload", path)
    wl.check_unknown(["csv", "num_requests", "min_len", "max_len", "zipf_theta", "pd_ratio",
                      "arrival", "arrival_rate", "pd_mode"])
    workload_csv = resolve(wl.get("csv"))
    if check_files and workload_csv and not os.path.isfile(workload_csv):
        raise ConfigError(f"workload CSV not found: {workload_csv}", path, "workload", "csv")
    try:
        workload = WorkloadSpec(
            num_requests=wl.get("num_requests", int, 1 if workload_csv else None,
                                required=not workload_csv),
            min_len=wl.get("min_len", int, 2 if workload_csv else None, required=not workload_csv),
            max_len=wl.get("max_len", int, 2 if workload_csv else None, required=not workload_csv),
            zipf_theta=wl.get("zipf_theta", float, 0.4),
            pd_ratio=PdRatio(wl.get("pd_ratio", float, 10.0)),
            arrival=wl.get("arrival", str, "all_at_zero"),
            arrival_rate=wl.get("arrival_rate", float),
            seed=run.seed,
            pd_mode=wl.get("pd_mode", str, "per_request"),
            max_seq_len=model.max_seq_len)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), path, "workload") from None

    sweep = None
    if parser.has_section("sweep"):
        sw = _Reader(parser, "sweep", path)
        sw.check_unknown(["axis", "values"])
        try:
            sweep = SweepConfig(sw.get("axis", str, required=True),
                                sw.get("values", _float_list, required=True))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc), path, "sweep") from None

    ou = _Reader(parser, "output", path)
    ou.check_unknown(["dir", "name", "trace"])
    out_dir = resolve(ou.get("dir", str, "results"))
    try:
        return ExperimentConfig(
            model=model, gpu=gpu, workload=workload, model_preset=mpreset, gpu_preset=gpreset,
            policy=policy, cost=cost, run=run, sweep=sweep, workload_csv=workload_csv,
            out_dir=out_dir, name=ou.get("name", str, "run"),
            write_trace=ou.get("trace", _bool, False), **cluster)
    except ValueError as exc:
        raise ConfigError(str(exc), path) from None


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from None
    return parse_config(text, path)


# --- serialisation ---------------------------------------------------------------

def _val(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _to_parser(cfg: ExperimentConfig) -> configparser.ConfigParser:
    p = configparser.ConfigParser(interpolation=None)
    if cfg.model_preset:
        p["model"] = {"preset": cfg.model_preset}
    else:
        p["model"] = {k: _val(v) for k, v in dataclasses.asdict(cfg.model).items()}
    if cfg.gpu_preset:
        p["gpu"] = {"preset": cfg.gpu_preset}
    else:
        p["gpu"] = {k: _val(v) for k, v in dataclasses.asdict(cfg.gpu).items()}
    p["cluster"] = {k: _val(getattr(cfg, k)) for k in
                    ("tp_degree", "pp_degree", "num_replicas", "intra_node_bw",
                     "inter_node_bw", "link_latency")}
    p["policy"] = {"name": cfg.policy.kind.value, "chunk_size": _val(cfg.policy.chunk_size),
                   "tile_adjust": _val(cfg.policy.tile_adjust)}
    cost = {"backend": cfg.cost.backend, "others_fraction": _val(cfg.cost.others_fraction)}
    if cfg.cost.path:
        cost["path"] = cfg.cost.path
    if cfg.cost.profiled_layers is not None:
        cost["profiled_layers"] = _val(cfg.cost.profiled_layers)
    p["cost"] = cost
    w = cfg.workload
    wl = {}
    if cfg.workload_csv:
        wl["csv"] = cfg.workload_csv
    wl.update({"num_requests": _val(w.num_requests), "min_len": _val(w.min_len),
               "max_len": _val(w.max_len), "zipf_theta": _val(w.zipf_theta),
               "pd_ratio": _val(float(w.pd_ratio)), "arrival": w.arrival,
               "pd_mode": w.pd_mode})
    if w.arrival_rate is not None:
        wl["arrival_rate"] = _val(w.arrival_rate)
    p["workload"] = wl
    r = cfg.run
    run = {"seed": _val(r.seed), "reserve_fraction": _val(r.reserve_fraction),
           "bubble_rule": r.bubble_rule}
    for key in ("batch_size", "max_seq_len", "baseline"):
        if getattr(r, key) is not None:
            run[key] = _val(getattr(r, key))
    p["run"] = run
    if cfg.sweep is not None:
        p["sweep"] = {"axis": cfg.sweep.axis,
                      "values": ", ".join(_fmt_num(v) for v in cfg.sweep.values)}
    p["output"] = {"dir": cfg.out_dir, "name": cfg.name, "trace": _val(cfg.write_trace)}
    return p


def serialize_config(cfg: ExperimentConfig) -> str:
    buf = io.StringIO()
    _to_parser(cfg).write(buf)
    return buf.getvalue()


# --- running -------------------------------------------------------------------

@dataclass
class RunResult:
    name: str
    document: str
    metrics: object
    batch_size: int
    speedup: Optional[object] = None          # SpeedupReport when a baseline ran
    traces: List[str] = field(default_factory=list)   # JSON-lines, one per replica
    paths: List[str] = field(default_factory=list)


def _cost_backend(cfg: ExperimentConfig):
    if cfg.cost.backend == "analytical":
        return AnalyticalCostModel(cfg.model, cfg.gpu, cfg.tp_degree, cfg.cost.others_fraction)
    table = ingest_profile(cfg.cost.path)
    return ProfileCostModel(table, tile_size=cfg.gpu.tile_size,
                            kernel_overhead=cfg.gpu.kernel_overhead,
                            profiled_layers=cfg.cost.profiled_layers,
                            others_fraction=cfg.cost.others_fraction)


def _requests(cfg: ExperimentConfig) -> List[Request]:
    if cfg.workload_csv:
        with open(cfg.workload_csv, encoding="utf-8") as fh:
            return requests_from_csv(fh.read())
    return build_requests(cfg.workload)


def _simulate_policy(cfg, policy, requests, cost, dep, batch_size, capacity):
    # requests go round-robin to independent replicas
    shards = [requests[i::cfg.num_replicas] for i in range(cfg.num_replicas)]
    comm = CommModel.for_deployment(dep)
    traces = [simulate(s, policy, cost, dep, batch_size, capacity, comm) for s in shards if s]
    return compute_metrics(traces, workload_hash(requests), cfg.run.bubble_rule), traces


def execute(cfg: ExperimentConfig) -> RunResult:
    """Run one resolved (sweep-free) config and build its results document."""
    dep = validate_deployment(cfg.model, cfg.cluster)
    requests = _requests(cfg)
    seq_cap = cfg.run.max_seq_len or max(max(r.seq_len for r in requests), cfg.workload.max_len)
    capacity = CapacityModel.for_deployment(dep, seq_cap, cfg.run.reserve_fraction)
    batch_size = cfg.run.batch_size or pipeline_batch_size(capacity, cfg.pp_degree)
    if batch_size < 1:
        raise DeploymentError(f"model does not fit: no room for one {seq_cap}-token request")
    cost = _cost_backend(cfg)
    metrics, traces = _simulate_policy(cfg, cfg.policy, requests, cost, dep, batch_size,
                                       capacity)
    extra = {
        "seed": cfg.run.seed,
        "batch_size": batch_size,
        "capacity_seq_len": seq_cap,
        "num_requests": len(requests),
        "version": __version__,
    }
    if cfg.policy.kind is PolicyKind.DECODE_MAXIMAL:
        chunk = cfg.policy.chunk_size
        if cfg.policy.tile_adjust and batch_size > 1:
            chunk = advise_chunk_size(chunk, batch_size, cfg.gpu.tile_size)
        extra["effective_chunk_size"] = chunk
    speedup = None
    if cfg.run.baseline:
        base, _ = _simulate_policy(cfg, SchedulerPolicy(PolicyKind(cfg.run.baseline)),
                                   requests, cost, dep, batch_size, capacity)
        speedup = compare_runs(base, metrics)
        extra["baseline"] = base.to_dict()
        extra["speedup"] = dataclasses.asdict(speedup)
    doc = results_document(cfg.to_dict(), metrics, extra)
    jsonl = [t.to_jsonl() for t in traces] if cfg.write_trace else []
    return RunResult(cfg.name, doc, metrics, batch_size, speedup, jsonl)


def _execute_text(text: str) -> RunResult:
    # process-pool entry point: configs travel as serialised text
    return execute(parse_config(text, check_files=False))


def write_result(res: RunResult, out_dir: str) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{res.name}.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(res.document)
    res.paths = [path] + write_plot_csvs(out_dir, res.name, res.metrics)
    for i, text in enumerate(res.traces):
        suffix = "" if len(res.traces) == 1 else f"_r{i}"
        tpath = os.path.join(out_dir, f"{res.name}_trace{suffix}.jsonl")
        with open(tpath, "w", encoding="utf-8") as fh:
            fh.write(text)
        res.paths.append(tpath)
    return res.paths


SWEEP_COLUMNS = ("value", "throughput", "makespan", "median_bubble", "per_token_prefill",
                 "per_token_decode", "decode_speedup", "batch_size", "throughput_ratio")


def run_sweep(cfg: ExperimentConfig, parallel: int = 1) -> List[RunResult]:
    points = [cfg.at_sweep_point(v) for v in cfg.sweep.values]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_execute_text, [serialize_config(p) for p in points]))
    return [execute(p) for p in points]


def sweep_csv(cfg: ExperimentConfig, results: Sequence[RunResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow((cfg.sweep.axis,) + SWEEP_COLUMNS[1:])
    for v, res in zip(cfg.sweep.values, results):
        m = res.metrics
        w.writerow([_fmt_num(v), repr(m.throughput), repr(m.makespan), repr(m.median_bubble),
                    repr(m.per_token_prefill), repr(m.per_token_decode), repr(m.decode_speedup),
                    res.batch_size,
                    repr(res.speedup.throughput_ratio) if res.speedup else ""])
    return buf.getvalue()


# --- commands --------------------------------------------------------------------

def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    if cfg.sweep is not None:
        return _sweep(cfg, args.parallel)
    res = execute(cfg)
    for p in write_result(res, cfg.out_dir):
        print(p)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if cfg.sweep is None:
        raise ConfigError("no [sweep] section", args.config, "sweep")
    return _sweep(cfg, args.parallel)


def _sweep(cfg: ExperimentConfig, parallel: int) -> int:
    results = run_sweep(cfg, parallel)
    for res in results:
        for p in write_result(res, cfg.out_dir):
            print(p)
    combined = os.path.join(cfg.out_dir, f"{cfg.name}_sweep.csv")
    with open(combined, "w", encoding="utf-8") as fh:
        fh.write(sweep_csv(cfg, results))
    print(combined)
    return EXIT_OK


def cmd_verify_chunking(args) -> int:
    if not 1 <= args.prefill <= 4096 or not 1 <= args.hidden <= 64:
        raise ConfigError("need 1 <= prefill <= 4096 and 1 <= hidden <= 64")
    if not 1 <= args.chunk:
        raise ConfigError("chunk must be >= 1")
    dev = max_deviation(args.prefill, min(args.chunk, args.prefill), args.hidden, args.seed)
    ok = dev <= args.tolerance
    print(f"prefill={args.prefill} chunk={args.chunk} hidden={args.hidden} seed={args.seed} "
          f"max_abs_deviation={dev:.3e} {'OK' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_INVARIANT


def plan_rows(model: ModelSpec, gpu: GpuSpec, seq_len: int, chunk: int, tile: int,
              tp: int = 1, pp: int = 1,
              reserve: float = CALIBRATED_RESERVE_FRACTION) -> List[Tuple[str, str]]:
    """Capacity and chunking advice as (quantity, value) rows."""
    gpu = dataclasses.replace(gpu, tile_size=tile)
    dep = validate_deployment(model, ClusterSpec(gpu, tp, pp))
    cap = CapacityModel.for_deployment(dep, seq_len, reserve)
    b = max_batch_size(cap)
    rows = [("model", model.name), ("gpu", gpu.name), ("tp_degree", str(tp)),
            ("pp_degree", str(pp)), ("layers_per_stage", str(dep.layers_per_stage)),
            ("param_bytes_per_gpu", f"{dep.param_bytes_per_gpu:.6g}"),
            ("kv_bytes_per_token", f"{dep.kv_bytes_per_token:.6g}"),
            ("max_seq_len", str(seq_len)), ("reserve_fraction", repr(reserve))]
    if b < 1:
        rows.append(("max_batch_size", "0 (model does not fit)"))
        return rows
    rows.append(("max_batch_size", str(b)))
    try:
        adjusted = advise_chunk_size(chunk, b, tile)
        rows.append(("adjusted_chunk", str(adjusted)))
    except ValueError as exc:
        adjusted = None
        rows.append(("adjusted_chunk", f"n/a ({exc})"))
    if b < 2:
        rows.append(("optimal_pd", "undefined (no decode slots)"))
    else:
        rows.append(("optimal_pd", f"{float(optimal_pd(chunk, b)):.4f}"))
    # one decode-maximal batch: a chunk plus B-1 decodes each attending L tokens
    c = adjusted if adjusted else chunk
    comp = BatchComposition.build([(c, 0)], [seq_len] * (b - 1))
    total, per_op = AnalyticalCostModel(model, gpu, tp).batch_time(comp, dep.layers_per_stage)
    for k, t in per_op.items():
        rows.append((f"time_{k.value}_ms", f"{t * 1e3:.4f}"))
    rows.append(("time_batch_ms", f"{total * 1e3:.4f}"))
    return rows


def cmd_plan(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        model, gpu, tp, pp = cfg.model, cfg.gpu, cfg.tp_degree, cfg.pp_degree
        reserve = cfg.run.reserve_fraction
        seq_len = cfg.run.max_seq_len or cfg.workload.max_len
        chunk = cfg.policy.chunk_size
    else:
        model, gpu, tp, pp = None, None, 1, 1
        reserve, seq_len, chunk = CALIBRATED_RESERVE_FRACTION, 1024, 256
    try:
        model = model_preset(args.model) if args.model else model or model_preset("llama-13b")
        gpu = gpu_preset(args.gpu) if args.gpu else gpu or gpu_preset("a6000")
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from None
    tp = args.tp or tp
    pp = args.pp or pp
    seq_len = args.max_seq_len or seq_len
    chunk = args.chunk or chunk
    reserve = args.reserve if args.reserve is not None else reserve
    tile = args.tile or gpu.tile_size
    rows = plan_rows(model, gpu, seq_len, chunk, tile, tp, pp, reserve)
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "plan.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["quantity", "value"])
            w.writerows(rows)
        print(path)
    fits = not rows[-1][1].startswith("0 (")
    return EXIT_OK if fits else EXIT_INVARIANT


def cmd_ingest_profile(args) -> int:
    table = ingest_profile(args.path)
    print(f"{args.path}: {len(table)} rows")
    fits = {}
    for kind in MAIN_OPS:
        for phase in PHASES:
            pts = table.points(kind, phase)
            if not pts:
                continue
            try:
                coef = fit_profile(table, kind, phase, args.tile)
                fits[f"{kind.value}/{phase}"] = [float(c) for c in coef]
                desc = " ".join(f"{c:.6g}" for c in coef)
            except InsufficientProfileData:
                desc = "lookup only (fewer than 2 token counts)"
            print(f"  {kind.value:<8} {phase:<8} {len(pts):>4} rows  {desc}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "profile_fit.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"source": args.path, "rows": len(table), "tile_size": args.tile,
                       "coefficients_s": fits}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chunkserve", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def experiment(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", help="output directory (overrides [output] dir)")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--parallel", type=int, default=1, metavar="N",
                       help="run sweep points in N worker processes")
        p.set_defaults(fn=fn)

    experiment("run", cmd_run, "run one experiment (or its sweep, if configured)")
    experiment("sweep", cmd_sweep, "run every point of the config's [sweep]")

    p = sub.add_parser("verify-chunking", help="check chunked prefill against full prefill")
    p.add_argument("--prefill", type=int, default=12)
    p.add_argument("--chunk", type=int, default=4)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.set_defaults(fn=cmd_verify_chunking)

    p = sub.add_parser("plan", help="batch size, chunk advice and roofline times")
    p.add_argument("--config", help="take model, gpu and cluster from a config")
    p.add_argument("--model", help="model preset name")
    p.add_argument("--gpu", help="GPU preset name")
    p.add_argument("--max-seq-len", type=int, help="L, tokens reserved per request")
    p.add_argument("--chunk", type=int, help="target chunk size")
    p.add_argument("--tile", type=int, help="tile size (default: the GPU's)")
    p.add_argument("--tp", type=int)
    p.add_argument("--pp", type=int)
    p.add_argument("--reserve", type=float, help="reserved memory fraction")
    p.add_argument("--out", help="also write plan.csv here")
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("ingest-profile", help="validate a profile CSV and fit its series")
    p.add_argument("path")
    p.add_argument("--tile", type=int, default=1, help="tile size for the linear-op fits")
    p.add_argument("--out", help="write profile_fit.json here")
    p.set_defaults(fn=cmd_ingest_profile)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ProfileFormatError, DeploymentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, InsufficientProfileData) as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
