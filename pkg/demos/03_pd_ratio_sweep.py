"""
Where decode-maximal batching helps most
========================================

With chunk size C and batch size B, each batch carries one chunk and B-1
decodes. A request set whose prefill-to-decode token ratio is near
C/(B-1) keeps every batch full of both. This sweep compares the
throughput of decode-maximal batching against request-level batching for
a range of ratios, on LLaMA-13B on an A6000.
"""

from chunkserve import (AnalyticalCostModel, CapacityModel, ClusterSpec, Request,
                        SchedulerPolicy, gpu_preset, max_batch_size, model_preset, optimal_pd,
                        split_pd, validate_deployment)
from chunkserve.engine import simulate

model = model_preset("llama-13b")
gpu = gpu_preset("a6000")
dep = validate_deployment(model, ClusterSpec(gpu))
cap = CapacityModel.for_deployment(dep, 1024)
batch = max_batch_size(cap)
cost = AnalyticalCostModel(model, gpu)
print(f"B = {batch}, predicted best P:D = {float(optimal_pd(256, batch)):.2f}")

for tile_adjust in (False, True):
    label = "chunk 256 minus the decode slots" if tile_adjust else "chunk 256 as given"
    print(f"\n{label}")
    for pd in (4, 8, 12, 14, 15, 20, 30, 60):
        p, d = split_pd(1024, pd)
        reqs = [Request(i, 0.0, p, d) for i in range(180)]
        base = simulate(reqs, SchedulerPolicy.request_level(), cost, dep, batch, cap)
        ours = simulate(reqs, SchedulerPolicy.decode_maximal(256, tile_adjust), cost, dep,
                        batch, cap)
        ratio = base.makespan / ours.makespan
        print(f"  P:D {pd:>3} (P={p}, D={d:>3})  speedup {ratio:5.3f}  " + "#" * int(ratio * 40))
