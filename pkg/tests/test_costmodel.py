import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chunkserve import (AnalyticalCostModel, BatchComposition, ModelSpec, OpCost, OpKind,
                        batch_time_analytical, ingest_profile, model_preset, op_cost,
                        profile_time, roofline_time, tile_penalty_demo)
from chunkserve.core import MODEL_PRESETS, GpuSpec
from chunkserve.costmodel import (LINEAR_OPS, ConstantCostModel, InsufficientProfileData,
                                  ProfileCostModel, ProfileFormatError, arithmetic_intensity,
                                  attention_kernels, effective_tokens, fit_profile,
                                  kv_read_bytes)

from conftest import reference_breakdown_csv
from oracles import enumerate_decode_kv_bytes

TOY = ModelSpec("toy", num_layers=1, num_heads=1, hidden_size=4, ffn_hidden=8)


def ideal_gpu(**kw):
    base = dict(name="ideal", peak_flops=1e14, mem_bandwidth=1e12, mem_capacity=1e10,
                tile_size=1, compute_efficiency=1.0, memory_efficiency=1.0, kernel_overhead=0.0)
    base.update(kw)
    return GpuSpec(**base)


class TestOpCost:
    def test_preproj_flops(self):
        comp = BatchComposition.build(decode=[1, 1])
        assert op_cost(OpKind.PREPROJ, comp, TOY).flops == 2 * 2 * 4 * 12 == 192

    def test_prefill_attention_flops(self):
        comp = BatchComposition.build([(2, 0)])
        assert op_cost(OpKind.ATTN, comp, TOY).flops == 4 * 4 * (1 + 2) == 48

    def test_prefill_attention_with_offset(self):
        # rows s+1 .. s+c of the causal triangle
        comp = BatchComposition.build([(3, 5)])
        assert op_cost(OpKind.ATTN, comp, TOY).flops == 4 * 4 * (6 + 7 + 8)

    def test_decode_kv_read_bytes(self, llama13b):
        comp = BatchComposition.build(decode=[1024])
        oracle = enumerate_decode_kv_bytes(1024, 5120, 2)
        assert oracle == 20_971_520
        assert kv_read_bytes(comp, llama13b) == oracle

    def test_prefill_kv_read_matches_enumeration(self, llama13b):
        comp = BatchComposition.build([(256, 768)])
        assert kv_read_bytes(comp, llama13b) == enumerate_decode_kv_bytes(1024, 5120, 2)

    @pytest.mark.parametrize("kind", LINEAR_OPS)
    def test_tp_halves_linear_flops(self, kind, llama13b):
        comp = BatchComposition.build([(300, 0)], [700, 800])
        one = op_cost(kind, comp, llama13b, 1, 128)
        two = op_cost(kind, comp, llama13b, 2, 128)
        assert two.flops * 2 == one.flops

    def test_tile_quantizes_linear_only(self):
        comp = BatchComposition.build([(5, 0)])
        assert op_cost(OpKind.FFN_LN1, comp, TOY, tile_size=4).flops == 2 * 8 * 4 * 8
        assert op_cost(OpKind.ATTN, comp, TOY, tile_size=4).flops == \
            op_cost(OpKind.ATTN, comp, TOY, tile_size=1).flops

    def test_others_has_no_cost(self):
        assert op_cost(OpKind.OTHERS, BatchComposition.build([(4, 0)]), TOY) == OpCost(0, 0)

    def test_attention_kernels_batch_decodes(self, llama13b):
        comp = BatchComposition.build([(8, 0), (4, 2)], [10, 20, 30])
        assert len(attention_kernels(comp, llama13b)) == 3

    def test_opcost_validation(self):
        with pytest.raises(ValueError):
            OpCost(-1, 0)
        assert OpCost(4, 2).intensity == 2
        assert OpCost(1, 0).intensity == math.inf

    def test_effective_tokens(self):
        assert [effective_tokens(t, 128) for t in (1, 128, 129, 256, 257)] == \
            [128, 128, 256, 256, 384]

    def test_composition_validation(self):
        with pytest.raises(ValueError):
            BatchComposition.build([(0, 0)])
        with pytest.raises(ValueError):
            BatchComposition.build(decode=[0])
        with pytest.raises(ValueError):
            BatchComposition().phase


class TestRoofline:
    def test_compute_bound(self):
        g = ideal_gpu()
        assert roofline_time(OpCost(1e9, 1e6), g) == pytest.approx(1e-5)

    def test_memory_bound(self):
        assert roofline_time(OpCost(0, 1e6), ideal_gpu()) == pytest.approx(1e-6)

    def test_overhead_added(self):
        g = ideal_gpu(kernel_overhead=5e-6)
        assert roofline_time(OpCost(1e9, 1e9), g) == pytest.approx(1e-3 + 5e-6)

    def test_efficiencies_scale(self):
        g = ideal_gpu(compute_efficiency=0.5)
        assert roofline_time(OpCost(1e9, 0), g) == pytest.approx(2e-5)


class TestBatchTime:
    def test_single_decode_is_memory_bound(self, llama13b, a6000):
        comp = BatchComposition.build(decode=[1024])
        for kind in LINEAR_OPS:
            c = op_cost(kind, comp, llama13b, 1, a6000.tile_size)
            assert c.flops / (a6000.peak_flops * a6000.compute_efficiency) < \
                c.bytes / (a6000.mem_bandwidth * a6000.memory_efficiency)
        assert arithmetic_intensity(comp, llama13b) < 3

    def test_mixed_vs_prefill_differs_by_attention(self, llama13b, a6000):
        mixed = BatchComposition.build([(1021, 0)], [1024] * 3)
        prefill = BatchComposition.build([(1024, 0)])
        tm, pm = batch_time_analytical(mixed, llama13b, a6000)
        tp, pp = batch_time_analytical(prefill, llama13b, a6000)
        for kind in LINEAR_OPS:
            assert pm[kind] == pp[kind]
        assert tm - tp == pytest.approx(1.05 * (pm[OpKind.ATTN] - pp[OpKind.ATTN]), rel=1e-12)

    def test_others_fraction(self, llama13b, a6000):
        comp = BatchComposition.build([(512, 0)])
        total, per = batch_time_analytical(comp, llama13b, a6000, others_fraction=0.05)
        five = sum(v for k, v in per.items() if k is not OpKind.OTHERS)
        assert per[OpKind.OTHERS] == pytest.approx(0.05 * five)
        assert total == pytest.approx(1.05 * five)

    def test_layers_scale_linearly(self, llama13b, a6000):
        comp = BatchComposition.build([(512, 0)], [900])
        full, _ = batch_time_analytical(comp, llama13b, a6000)
        half, _ = batch_time_analytical(comp, llama13b, a6000, num_layers=20)
        assert half == pytest.approx(full / 2)

    def test_empty_batch(self, llama13b, a6000):
        assert batch_time_analytical(BatchComposition(), llama13b, a6000)[0] == 0.0

    def test_fusion_benefit(self, llama13b, a6000):
        chunk = BatchComposition.build([(255, 0)])
        plus = BatchComposition.build([(255, 0)], [1024])
        alone = BatchComposition.build(decode=[1024])
        marginal = batch_time_analytical(plus, llama13b, a6000)[0] - \
            batch_time_analytical(chunk, llama13b, a6000)[0]
        assert marginal < batch_time_analytical(alone, llama13b, a6000)[0]

    def test_cost_model_wrapper(self, llama13b, a6000):
        comp = BatchComposition.build([(100, 0)], [50])
        cm = AnalyticalCostModel(llama13b, a6000)
        assert cm.batch_time(comp) == batch_time_analytical(comp, llama13b, a6000)
        with pytest.raises(ValueError):
            AnalyticalCostModel(llama13b, a6000, others_fraction=1.0)

    @settings(max_examples=60, deadline=None)
    @given(c=st.integers(1, 2000), s=st.integers(0, 2000), nd=st.integers(0, 40),
           ctx=st.integers(1, 4000), which=st.sampled_from(["chunk", "decodes", "ctx"]))
    def test_monotone(self, llama13b, a6000, c, s, nd, ctx, which):
        base = BatchComposition.build([(c, s)], [ctx] * nd)
        if which == "chunk":
            bigger = BatchComposition.build([(c + 1, s)], [ctx] * nd)
        elif which == "decodes":
            bigger = BatchComposition.build([(c, s)], [ctx] * (nd + 1))
        else:
            bigger = BatchComposition.build([(c, s)], [ctx + 1] * nd)
        assert batch_time_analytical(bigger, llama13b, a6000)[0] >= \
            batch_time_analytical(base, llama13b, a6000)[0]


class TestArithmeticIntensity:
    @pytest.mark.parametrize("name", MODEL_PRESETS)
    def test_prefill_above_decode(self, name):
        m = model_preset(name)
        pre = arithmetic_intensity(BatchComposition.build([(128, 0)]), m)
        for b in range(1, 65):
            assert pre > arithmetic_intensity(BatchComposition.build(decode=[1024] * b), m)

    def test_two_orders_of_magnitude_at_batch_one(self, llama13b):
        pre = arithmetic_intensity(BatchComposition.build([(1024, 0)]), llama13b)
        dec = arithmetic_intensity(BatchComposition.build(decode=[1024]), llama13b)
        assert pre / dec >= 100


class TestTileQuantization:
    def test_step_at_tile_boundary(self, llama13b, a6000):
        assert tile_penalty_demo(257, a6000, llama13b) > tile_penalty_demo(256, a6000, llama13b)

    def test_same_tile_same_linear_time(self, llama13b, a6000):
        a = batch_time_analytical(BatchComposition.build([(250, 0)]), llama13b, a6000)[1]
        b = batch_time_analytical(BatchComposition.build([(256, 0)]), llama13b, a6000)[1]
        for kind in LINEAR_OPS:
            assert a[kind] == b[kind]
        assert a[OpKind.ATTN] < b[OpKind.ATTN]

    @given(st.integers(1, 1024))
    def test_linear_flops_piecewise_constant(self, t):
        m = model_preset("llama-13b")
        f = op_cost(OpKind.FFN_LN2, BatchComposition.build([(t, 0)]), m, tile_size=128).flops
        top = effective_tokens(t, 128)
        g = op_cost(OpKind.FFN_LN2, BatchComposition.build([(top, 0)]), m, tile_size=128).flops
        assert f == g


PROFILE_3 = """op,phase,tokens,context,time_us
preproj,prefill,128,0,100
preproj,prefill,256,0,180
attn,decode,4,1024,50.5
"""


class TestProfileIngest:
    def test_three_rows(self):
        t = ingest_profile(PROFILE_3)
        assert len(t) == 3
        assert t.lookup(OpKind.ATTN, "decode", 4, 1024).time_us == 50.5

    def test_file_object_and_path(self, tmp_path):
        p = tmp_path / "p.csv"
        p.write_text(PROFILE_3)
        assert ingest_profile(str(p)) == ingest_profile(io.StringIO(PROFILE_3))

    def test_zero_time_rejected_with_line(self):
        bad = PROFILE_3 + "ffn_ln1,mixed,10,0,0\n"
        with pytest.raises(ProfileFormatError) as ei:
            ingest_profile(bad)
        assert ei.value.line == 5

    def test_duplicate_key(self):
        with pytest.raises(ProfileFormatError, match="duplicate"):
            ingest_profile(PROFILE_3 + "preproj,prefill,128,0,101\n")

    @pytest.mark.parametrize("row,msg", [
        ("others,prefill,1,0,1", "unknown op"),
        ("attn,warmup,1,0,1", "unknown phase"),
        ("attn,decode,x,0,1", "integers"),
        ("attn,decode,1,0", "5 fields"),
        ("attn,decode,1,0,abc", "bad time"),
        ("attn,decode,0,0,1", "tokens must be"),
    ])
    def test_bad_rows(self, row, msg):
        with pytest.raises(ProfileFormatError, match=msg):
            ingest_profile("op,phase,tokens,context,time_us\n" + row + "\n")

    def test_bad_header(self):
        with pytest.raises(ProfileFormatError, match="header"):
            ingest_profile("op,phase,tokens,time_us\nattn,decode,1,1\n")

    def test_comments_and_blank_lines(self):
        t = ingest_profile("# measured\n\n" + PROFILE_3 + "# end\n")
        assert len(t) == 3

    def test_reference_table_round_trip(self):
        t = ingest_profile(reference_breakdown_csv())
        assert len(t) == 15
        again = ingest_profile(t.to_csv())
        assert again.entries == t.entries


class TestProfileTime:
    def test_exact_lookup(self):
        t = ingest_profile(PROFILE_3)
        assert profile_time(t, OpKind.PREPROJ, "prefill", 256, 0) == 180 / 1e6

    def test_two_point_interpolation(self):
        t = ingest_profile("op,phase,tokens,context,time_us\n"
                           "ffn_ln1,prefill,100,0,10000\nffn_ln1,prefill,300,0,20000\n")
        assert profile_time(t, OpKind.FFN_LN1, "prefill", 200, 0) == pytest.approx(0.015, rel=1e-12)

    def test_attention_grid_recovery(self):
        rows = ["op,phase,tokens,context,time_us"]
        for tok in (1, 4, 16, 64, 256):
            for ctx in (128, 512, 1024, 2048, 4096):
                rows.append(f"attn,mixed,{tok},{ctx},{1 + 0.01 * tok + 0.0001 * tok * ctx!r}")
        t = ingest_profile("\n".join(rows) + "\n")
        coef = fit_profile(t, OpKind.ATTN, "mixed") * 1e6
        assert np.allclose(coef, [1, 0.01, 0.0001], rtol=1e-6, atol=0)

    def test_insufficient_data(self):
        t = ingest_profile(PROFILE_3)
        with pytest.raises(InsufficientProfileData):
            profile_time(t, OpKind.ATTN, "decode", 8, 1024)

    def test_clamped_to_overhead(self):
        t = ingest_profile("op,phase,tokens,context,time_us\n"
                           "postproj,decode,10,0,100\npostproj,decode,20,0,200\n")
        assert profile_time(t, OpKind.POSTPROJ, "decode", 1, 0, kernel_overhead=5e-5) == 5e-5

    def test_profile_cost_model(self):
        t = ingest_profile(reference_breakdown_csv())
        cm = ProfileCostModel(t, profiled_layers=40, others_fraction=0.0)
        total, per = cm.batch_time(BatchComposition.build([(1024, 0)]))
        assert total == pytest.approx(0.2348)
        half, _ = cm.batch_time(BatchComposition.build([(1024, 0)]), num_layers=20)
        assert half == pytest.approx(total / 2)
        assert per[OpKind.ATTN] == pytest.approx(0.010)


class TestConstantCost:
    def test_constant(self):
        cm = ConstantCostModel(0.5)
        assert cm.batch_time(BatchComposition.build(decode=[3]))[0] == 0.5
        assert cm.batch_time(BatchComposition())[0] == 0.0
        with pytest.raises(ValueError):
            ConstantCostModel(0)
