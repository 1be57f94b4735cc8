"""
Chunked prefill gives the same answer as a full prefill
=======================================================

A prompt can be pushed through attention in pieces, as long as each piece
sees the keys and values of everything before it plus a causal mask
inside the piece. This script checks that on a toy single-head layer and
shows what the chunking costs in re-read KV cache.
"""

import numpy as np

from chunkserve import kv_reload_tokens, mask_for_chunk, plan_chunks
from chunkserve.chunker import ToyWeights, toy_chunked_prefill, toy_full_prefill

# a 12-token prompt split into chunks of 4
plan = plan_chunks(12, 4)
print("chunks (start, length):", plan.chunks)

# the mask of the second chunk: query i may look at keys 0..i
mask = mask_for_chunk(plan, 1)
print("second chunk, dense mask over keys 0..7:")
print(mask.to_dense(8).astype(int))

# run both ways with random weights and compare
rng = np.random.default_rng(7)
weights = ToyWeights.random(8, rng)
x = rng.standard_normal((12, 8))
full, _ = toy_full_prefill(x, weights)
chunked, _ = toy_chunked_prefill(x, weights, plan)
print("max |full - chunked| =", np.max(np.abs(full - chunked)))

# every chunk re-reads the cache written by the chunks before it
for c in (1024, 512, 256, 128):
    reads = kv_reload_tokens(plan_chunks(1024, c))
    print(f"P=1024, C={c:>4}: {reads:>6} KV tokens read ({reads / 1024:.1f}x the prompt)")
