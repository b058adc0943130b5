# # One-bit compression with error feedback
#
# A vector is sent as its signs plus one magnitude. On its own that throws
# information away every call. Error feedback keeps what was lost and adds it
# to the next vector, so over many calls the decoded stream tracks the input.

import numpy as np

from onebit_lamb import ErrorFeedback, compress_1bit, compress_with_feedback, compressed_bits, decompress

v = np.array([2.0, -1.0, 0.5, -0.5])
block = compress_1bit(v)
print("signs:", block.signs.astype(int), "scale:", block.scale)
print("decoded:", decompress(block))

# The wire format is the packed sign bits (lowest bit first) and a float32
# scale. A block of d elements costs d + 32 bits.

print(len(block.to_bytes()), "bytes on the wire,", compressed_bits(block), "bits counted")

# ## Feedback makes the errors cancel
#
# Feed the same small vector fifty times. Without feedback the decoded sum
# drifts away from the true sum; with feedback the gap stays bounded by one
# residual.

rng = np.random.default_rng(0)
x = rng.normal(size=8)
fb = ErrorFeedback.zeros(8)
plain, fed = np.zeros(8), np.zeros(8)
for _ in range(50):
    plain += decompress(compress_1bit(x))
    fed += decompress(compress_with_feedback(x, fb))
true = 50 * x
print("max error of summed stream, no feedback:  ", np.abs(plain - true).max())
print("max error of summed stream, with feedback:", np.abs(fed - true).max())
print("current residual:", np.abs(fb.delta).max())
