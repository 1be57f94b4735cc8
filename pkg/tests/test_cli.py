import csv
import json
import os

import pytest
from hypothesis import given, settings, strategies as st

from chunkserve.cli import (ConfigError, ExperimentConfig, execute, main, parse_config,
                            plan_rows, run_sweep, serialize_config, write_result)
from chunkserve.report import compute_metrics
from chunkserve.core import gpu_preset, model_preset
from chunkserve.workload import WorkloadSpec

from conftest import reference_breakdown_csv

BASE = """
[model]
preset = llama-13b

[gpu]
preset = a6000

[policy]
name = decode_maximal
chunk_size = 256

[workload]
num_requests = 24
min_len = 128
max_len = 512
zipf_theta = 0.4
pd_ratio = 10

[run]
seed = 3

[output]
name = small
"""


def write(tmp_path, text, name="exp.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def rows(result_path):
    with open(result_path) as fh:
        return json.load(fh)


class TestConfig:
    def test_parse_presets(self, tmp_path):
        cfg = parse_config(BASE, write(tmp_path, BASE))
        assert cfg.model == model_preset("llama-13b") and cfg.model_preset == "llama-13b"
        assert cfg.gpu_preset == "a6000"
        assert cfg.workload.num_requests == 24 and cfg.workload.seed == 3
        assert cfg.out_dir == os.path.join(str(tmp_path), "results")

    def test_round_trip(self, tmp_path):
        cfg = parse_config(BASE, write(tmp_path, BASE))
        text = serialize_config(cfg)
        assert parse_config(text) == cfg
        assert serialize_config(parse_config(text)) == text

    def test_override_drops_preset_name(self):
        cfg = parse_config(BASE.replace("preset = a6000", "preset = a6000\ntile_size = 64"))
        assert cfg.gpu_preset is None and cfg.gpu.tile_size == 64
        assert parse_config(serialize_config(cfg)) == cfg

    @pytest.mark.parametrize("edit,where", [
        (("[run]", "[bogus]"), "bogus"),
        (("seed = 3", "seed = 3\ncolour = red"), "colour"),
        (("seed = 3", "seed = three"), "seed"),
        (("num_requests = 24\n", ""), "num_requests"),
        (("chunk_size = 256", "chunk_size = 0"), "policy"),
        (("name = decode_maximal", "name = fastest"), "policy"),
        (("[run]", "[cluster]\npp_degree = 3\n[run]"), "cluster"),
        (("max_len = 512", "max_len = 9000"), "workload"),
    ])
    def test_errors_name_location(self, edit, where):
        with pytest.raises(ConfigError) as info:
            parse_config(BASE.replace(*edit), "exp.ini")
        assert where in str(info.value) and "exp.ini" in str(info.value)

    def test_missing_profile(self, tmp_path):
        text = BASE + "\n[cost]\nbackend = profile\npath = nowhere.csv\n"
        with pytest.raises(ConfigError, match="nowhere.csv"):
            parse_config(text, write(tmp_path, text))

    def test_sweep_points(self):
        cfg = parse_config(BASE + "\n[sweep]\naxis = chunk_size\nvalues = 128, 512\n")
        pts = [cfg.at_sweep_point(v) for v in cfg.sweep.values]
        assert [p.policy.chunk_size for p in pts] == [128, 512]
        assert [p.name for p in pts] == ["small_chunk_size-128", "small_chunk_size-512"]
        assert all(p.sweep is None for p in pts)

    @pytest.mark.parametrize("axis,values", [("speed", "1"), ("batch_size", "2.5"),
                                             ("pd_ratio", "0")])
    def test_bad_sweep(self, axis, values):
        with pytest.raises(ConfigError):
            parse_config(BASE + f"\n[sweep]\naxis = {axis}\nvalues = {values}\n")


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 500), theta=st.floats(0, 2), ratio=st.floats(0.1, 100),
       chunk=st.integers(1, 2048), pp=st.sampled_from([1, 2, 4]), seed=st.integers(0, 2**31),
       rule=st.sampled_from(["full", "fractional"]), tile=st.booleans())
def test_round_trip_property(n, theta, ratio, chunk, pp, seed, rule, tile):
    text = (BASE.replace("num_requests = 24", f"num_requests = {n}")
            .replace("zipf_theta = 0.4", f"zipf_theta = {theta!r}")
            .replace("pd_ratio = 10", f"pd_ratio = {ratio!r}")
            .replace("chunk_size = 256", f"chunk_size = {chunk}\ntile_adjust = {tile}")
            .replace("seed = 3", f"seed = {seed}\nbubble_rule = {rule}")
            + f"\n[cluster]\npp_degree = {pp}\n")
    cfg = parse_config(text)
    assert isinstance(cfg, ExperimentConfig)
    assert parse_config(serialize_config(cfg)) == cfg


class TestRun:
    def test_run_outputs(self, tmp_path, capsys):
        path = write(tmp_path, BASE)
        assert main(["run", "--config", path]) == 0
        out = tmp_path / "results"
        assert sorted(os.listdir(out)) == ["small.json", "small_bubble_cdf.csv",
                                           "small_completion.csv"]
        doc = rows(out / "small.json")
        # L defaults to the workload's longest request (512 tokens)
        assert doc["batch_size"] == 37 and doc["capacity_seq_len"] == 512
        assert doc["metrics"]["policy"] == "decode_maximal"
        assert doc["config"]["run"]["seed"] == "3"

    def test_seed_override_and_determinism(self, tmp_path):
        path = write(tmp_path, BASE)
        assert main(["run", "--config", path, "--seed", "5", "--out", str(tmp_path / "a")]) == 0
        assert main(["run", "--config", path, "--seed", "5", "--out", str(tmp_path / "b")]) == 0
        a = rows(tmp_path / "a" / "small.json")
        b = rows(tmp_path / "b" / "small.json")
        assert a["metrics"] == b["metrics"] and a["seed"] == 5

    def test_baseline(self, tmp_path):
        cfg = parse_config(BASE.replace("seed = 3", "seed = 3\nbaseline = orca_best"))
        doc = json.loads(execute(cfg).document)
        assert doc["baseline"]["policy"] == "orca_best"
        assert doc["speedup"]["throughput_ratio"] > 0

    def test_workload_csv(self, tmp_path):
        (tmp_path / "w.csv").write_text("id,arrival_s,prefill,decode\n0,0.0,100,10\n1,0.5,40,4\n")
        text = BASE.replace("num_requests = 24\nmin_len = 128\nmax_len = 512\n", "csv = w.csv\n")
        cfg = parse_config(text, write(tmp_path, text))
        res = execute(cfg)
        assert json.loads(res.document)["num_requests"] == 2
        assert res.metrics.total_tokens == 154

    def test_profile_backend(self, tmp_path):
        lines = ["op,phase,tokens,context,time_us"]
        for phase in ("prefill", "decode", "mixed"):
            for t in (8, 64, 256, 512):
                for op, per in (("preproj", 50), ("postproj", 17), ("ffn_ln1", 70),
                                ("ffn_ln2", 70)):
                    lines.append(f"{op},{phase},{t},0,{100 + per * t}")
                for ctx in (128, 512):
                    lines.append(f"attn,{phase},{t},{ctx},{20 + 2 * t + 0.01 * t * ctx}")
        (tmp_path / "p.csv").write_text("\n".join(lines) + "\n")
        text = BASE + "\n[cost]\nbackend = profile\npath = p.csv\nprofiled_layers = 40\n"
        res = execute(parse_config(text, write(tmp_path, text)))
        analytical = execute(parse_config(BASE)).metrics
        assert res.metrics.makespan > 0 and res.metrics.makespan != analytical.makespan

    def test_replicas_split_requests(self):
        one = execute(parse_config(BASE)).metrics
        two = execute(parse_config(BASE + "\n[cluster]\nnum_replicas = 2\n")).metrics
        assert two.total_tokens == one.total_tokens and two.makespan < one.makespan

    def test_sweep(self, tmp_path):
        text = BASE + "\n[sweep]\naxis = pd_ratio\nvalues = 5, 20\n"
        path = write(tmp_path, text)
        assert main(["sweep", "--config", path]) == 0
        out = tmp_path / "results"
        assert {"small_pd_ratio-5.json", "small_pd_ratio-20.json",
                "small_sweep.csv"} <= set(os.listdir(out))
        table = list(csv.reader(open(out / "small_sweep.csv")))
        assert table[0][0] == "pd_ratio" and [r[0] for r in table[1:]] == ["5", "20"]

    def test_parallel_matches_sequential(self):
        cfg = parse_config(BASE + "\n[sweep]\naxis = chunk_size\nvalues = 128, 256\n")
        seq = [r.document for r in run_sweep(cfg, 1)]
        par = [r.document for r in run_sweep(cfg, 2)]
        assert seq == par

    def test_five_point_sweep(self, tmp_path):
        text = BASE + "\n[sweep]\naxis = pd_ratio\nvalues = 2, 5, 10, 20, 50\n"
        assert main(["run", "--config", write(tmp_path, text), "--parallel", "2"]) == 0
        files = os.listdir(tmp_path / "results")
        assert len([f for f in files if f.endswith(".json")]) == 5
        assert len([f for f in files if f.endswith("_sweep.csv")]) == 1

    def test_trace_export(self, tmp_path):
        from chunkserve.report import load_trace
        from chunkserve.workload import build_requests
        text = BASE.replace("name = small", "name = small\ntrace = true")
        cfg = parse_config(text, write(tmp_path, text))
        res = execute(cfg)
        paths = write_result(res, cfg.out_dir)
        assert paths[-1].endswith("small_trace.jsonl")
        with open(paths[-1]) as fh:
            again = load_trace(fh.read(), build_requests(cfg.workload), "decode_maximal")
        assert compute_metrics(again, res.metrics.workload_hash).to_dict() == \
            res.metrics.to_dict()

    def test_sweep_without_section(self, tmp_path):
        assert main(["sweep", "--config", write(tmp_path, BASE)]) == 2

    def test_missing_config(self, tmp_path, capsys):
        assert main(["run", "--config", str(tmp_path / "none.ini")]) == 2
        assert "none.ini" in capsys.readouterr().err

    def test_missing_profile_exit(self, tmp_path, capsys):
        text = BASE + "\n[cost]\nbackend = profile\npath = gone.csv\n"
        assert main(["run", "--config", write(tmp_path, text)]) == 2
        assert "gone.csv" in capsys.readouterr().err

    def test_model_does_not_fit(self, tmp_path):
        text = BASE.replace("preset = llama-13b", "preset = gpt3")
        assert main(["run", "--config", write(tmp_path, text)]) == 2


class TestPlan:
    def test_llama13b(self):
        got = dict(plan_rows(model_preset("llama-13b"), gpu_preset("a6000"), 1024, 256, 128))
        assert got["max_batch_size"] == "18"
        assert got["adjusted_chunk"] == "239"
        assert got["optimal_pd"] == "15.0588"
        assert float(got["time_batch_ms"]) > 0

    def test_single_slot(self):
        got = dict(plan_rows(model_preset("llama-13b"), gpu_preset("a6000"), 12000, 256, 128))
        assert got["max_batch_size"] == "1"
        assert got["optimal_pd"] == "undefined (no decode slots)"

    def test_no_fit(self, capsys):
        assert main(["plan", "--model", "gpt3", "--gpu", "a100"]) == 1
        assert "0 (model does not fit)" in capsys.readouterr().out

    def test_pipeline_stages(self, tmp_path, capsys):
        assert main(["plan", "--model", "gpt3", "--gpu", "a100", "--tp", "8", "--pp", "8",
                     "--out", str(tmp_path)]) == 0
        table = dict(csv.reader(open(tmp_path / "plan.csv")))
        assert table["layers_per_stage"] == "12"

    def test_unknown_preset(self):
        assert main(["plan", "--model", "nope"]) == 2


class TestVerifyChunking:
    @pytest.mark.parametrize("args", [(12, 4, 8, 7), (1, 1, 2, 0), (1024, 256, 8, 42)])
    def test_passes(self, args, capsys):
        p, c, h, s = args
        assert main(["verify-chunking", "--prefill", str(p), "--chunk", str(c), "--hidden",
                     str(h), "--seed", str(s)]) == 0
        assert capsys.readouterr().out.strip().endswith("OK")

    def test_out_of_range(self):
        assert main(["verify-chunking", "--prefill", "5000"]) == 2
        assert main(["verify-chunking", "--hidden", "65"]) == 2

    def test_tolerance_breach(self):
        assert main(["verify-chunking", "--prefill", "64", "--chunk", "7", "--tolerance",
                     "-1"]) == 1


class TestIngestProfile:
    def test_fit_written(self, tmp_path, capsys):
        src = tmp_path / "p.csv"
        src.write_text(reference_breakdown_csv())
        assert main(["ingest-profile", str(src), "--out", str(tmp_path)]) == 0
        doc = json.load(open(tmp_path / "profile_fit.json"))
        assert doc["rows"] == 15
        assert "lookup only" in capsys.readouterr().out

    def test_bad_file(self, tmp_path):
        src = tmp_path / "p.csv"
        src.write_text("op,phase,tokens\nattn,prefill,4\n")
        assert main(["ingest-profile", str(src)]) == 2

    def test_missing_file(self, tmp_path):
        assert main(["ingest-profile", str(tmp_path / "none.csv")]) == 2


def test_workload_spec_from_config():
    cfg = parse_config(BASE)
    assert cfg.workload == WorkloadSpec(24, 128, 512, 0.4, 10.0, seed=3,
                                        max_seq_len=model_preset("llama-13b").max_seq_len)
