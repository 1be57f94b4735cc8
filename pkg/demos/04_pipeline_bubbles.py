"""
Pipeline bubbles with and without uniform batches
=================================================

With pipeline parallelism, a stage idles whenever the micro-batch ahead
of it took longer than the one it just finished. Batches that mix whole
prompts with decodes vary wildly in length. Chunked batches of a fixed
token budget are nearly uniform, so the stages wait on each other less.
"""

from chunkserve import (AnalyticalCostModel, CapacityModel, ClusterSpec, SchedulerPolicy,
                        WorkloadSpec, build_requests, compute_metrics, gpu_preset, model_preset,
                        pipeline_batch_size, validate_deployment)
from chunkserve.engine import simulate

model = model_preset("llama-33b")
gpu = gpu_preset("a100")
dep = validate_deployment(model, ClusterSpec(gpu, tp_degree=1, pp_degree=4))
cap = CapacityModel.for_deployment(dep, 4096)
batch = pipeline_batch_size(cap, 4)
cost = AnalyticalCostModel(model, gpu)
reqs = build_requests(WorkloadSpec(200, 1024, 4096, zipf_theta=0.4, pd_ratio=10, seed=0))
print(f"{len(reqs)} requests, {batch} per micro-batch, 4 stages")

results = {}
for policy in (SchedulerPolicy.orca_best(), SchedulerPolicy.decode_maximal(256)):
    m = compute_metrics(simulate(reqs, policy, cost, dep, batch, cap))
    results[policy.name] = m
    classes = ", ".join(f"{k} {v:.1f}s" for k, v in m.bubble_by_class.items())
    print(f"\n{policy.name}: makespan {m.makespan:.1f} s, median bubble per request "
          f"{m.median_bubble:.2f} s")
    print(f"  idle by cause: {classes}")

base, ours = results["orca_best"], results["decode_maximal"]
print(f"\nmedian bubble {base.median_bubble / ours.median_bubble:.2f}x lower, "
      f"makespan {base.makespan / ours.makespan:.2f}x shorter")
