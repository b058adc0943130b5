# # A compressed allreduce on a simulated cluster
#
# Four workers average a vector. Each worker owns one chunk: everyone sends it
# their compressed copy of that chunk, the owner averages and recompresses,
# then sends the result back to everyone. Every message is charged to a
# ledger.

import numpy as np

from onebit_lamb import SimCluster, volume_reduction

rng = np.random.default_rng(1)
n, d = 4, 1000
cluster = SimCluster(n)
inputs = [rng.normal(size=d) for _ in range(n)]

out = cluster.compressed_allreduce(inputs)
exact = np.mean(inputs, axis=0)
print("sign agreement with the exact average:", np.mean(np.sign(out) == np.sign(exact)))

# ## What it cost

ledger = cluster.ledger
print("bits sent:", ledger.total_bits)
print("same collective uncompressed (16-bit):", ledger.bits_uncompressed_equivalent)
print("reduction for this call: %.2fx" % ledger.reduction_factor())

# Over a whole run only the compression stage is cheap. With a warmup of
# 16.7% or 19.3% of the steps the end-to-end reduction is

for ratio in (0.167, 0.193):
    print(ratio, "->", round(volume_reduction(ratio, 16), 3))
