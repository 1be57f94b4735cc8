"""
Why decodes are cheap when they ride along with a prefill
=========================================================

Linear layers dominate a transformer iteration. A decode-only batch is
memory bound: it streams the full weights to produce a handful of tokens.
A prefill chunk is compute bound. Putting decodes into the same batch as
a chunk reuses the weight fetch, so each extra decode token costs little.
"""

from chunkserve import (AnalyticalCostModel, BatchComposition, gpu_preset, model_preset,
                        tile_penalty_demo)
from chunkserve.report import batching_breakdown

model = model_preset("llama-13b")
gpu = gpu_preset("a6000")
cost = AnalyticalCostModel(model, gpu)

# one chunk of 1024 prompt tokens, four decodes, and the two combined
prefill = BatchComposition.build([(1024, 0)])
decode = BatchComposition.build(decode=[1024] * 4)
mixed = BatchComposition.build([(1021, 0)], [1024] * 3)

print(f"{'scheme':<16}{'linear ms':>10}{'attn ms':>10}{'total ms':>10}"
      f"{'prefill/tok':>13}{'decode/tok':>12}")
for row in batching_breakdown(cost, prefill, decode, mixed):
    pre = f"{row.per_token_prefill * 1e3:.3f}" if row.per_token_prefill else "-"
    dec = f"{row.per_token_decode * 1e3:.3f}" if row.per_token_decode else "-"
    print(f"{row.scheme:<16}{row.linear * 1e3:>10.2f}{row.attn * 1e3:>10.2f}"
          f"{row.total * 1e3:>10.2f}{pre:>13}{dec:>12}")

# matmuls run in 128-token tiles, so one token past a tile boundary pays for a whole tile
for tokens in (128, 255, 256, 257, 384):
    print(f"{tokens:>4} prompt tokens: {tile_penalty_demo(tokens, gpu, model) * 1e3:7.2f} ms")
