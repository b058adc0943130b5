# # Fusing layers into one message, and why scaling matters
#
# All layer momenta go into one buffer so a step needs one collective. The
# catch is that a 1-bit block shares one magnitude: a layer with tiny momenta
# next to a layer with large ones gets drowned. Multiplying each layer by a
# fixed coefficient first evens the magnitudes out.

import numpy as np

from onebit_lamb import FusedView, SimCluster, apply_scaling, compute_scales, fuse, remove_scaling
from onebit_lamb.fusion import MomentumScales

rng = np.random.default_rng(2)
big, small = 40, 24


def small_layer_error(scales):
    cluster = SimCluster(2)
    errs = []
    for _ in range(50):
        local = [[rng.normal(0, 1.0, big), rng.normal(0, 0.01, small)] for _ in range(2)]
        bufs = [apply_scaling(fuse(m), scales).buffer for m in local]
        merged = FusedView(cluster.compressed_allreduce(bufs), fuse(local[0]).layout)
        remove_scaling(merged, scales)
        exact = (local[0][1] + local[1][1]) / 2
        errs.append(np.mean(np.abs(merged.layer(1) - exact)))
    return np.mean(errs)


scales = compute_scales([rng.normal(0, 1.0, big), rng.normal(0, 0.01, small)])
print("coefficients:", np.round(scales.coeffs, 3))
print("small-layer error without scaling:", small_layer_error(MomentumScales.ones(2)))
print("small-layer error with scaling:   ", small_layer_error(scales))
