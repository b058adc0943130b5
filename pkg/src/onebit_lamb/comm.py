"""In-process simulation of an n-worker data-parallel cluster.

The compressed allreduce runs in three phases over a buffer split into ``n``
chunks (worker ``j`` owns chunk ``j``):

1. gather: every worker compresses each chunk of ``input + own residual`` and
   sends chunk ``j`` to worker ``j``;
2. average: worker ``j`` averages the ``n`` decoded copies of its chunk (in
   ascending worker order) and compresses the average with its own server-side
   residual;
3. scatter: worker ``j`` sends the compressed average of chunk ``j`` to all
   other workers, who decode and concatenate.

Bits are charged to a :class:`VolumeLedger`. A worker's message to itself is
free, so a collective over a length-``d`` buffer charges ``(n - 1)`` outbound
copies of every chunk in each of the two communication phases. The lossless
allreduce follows the same pattern with uncompressed payloads at
``baseline_bits`` per element, which is also what the ledger records as the
uncompressed-equivalent volume of every collective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compression import (
    BASELINE_BITS,
    Compressor,
    ErrorFeedback,
    OneBitCompressor,
    compress_with_feedback,
)
from .numerics import DimensionError, as_vector, check_finite


@dataclass
class VolumeLedger:
    bits_gather: int = 0
    bits_scatter: int = 0
    bits_uncompressed_equivalent: int = 0
    compressed_calls: int = 0
    lossless_calls: int = 0

    @property
    def total_bits(self) -> int:
        return self.bits_gather + self.bits_scatter

    @property
    def calls(self) -> int:
        return self.compressed_calls + self.lossless_calls

    def reduction_factor(self) -> float:
        """Uncompressed-equivalent volume over actual volume (1.0 when nothing
        was sent, e.g. on a single worker)."""
        if self.total_bits == 0:
            return 1.0
        return self.bits_uncompressed_equivalent / self.total_bits

    def snapshot(self) -> "VolumeLedger":
        return VolumeLedger(**self.__dict__)


def chunk_bounds(d: int, n: int) -> list[tuple[int, int]]:
    """Chunk ``j`` covers ``[j*c, (j+1)*c)`` of the buffer zero-padded to
    ``n*c`` elements (``c = ceil(d/n)``), clipped back to the real length."""
    c = -(-d // n)
    return [(min(j * c, d), min((j + 1) * c, d)) for j in range(n)]


def volume_reduction(warmup_ratio: float, baseline_bits: int = BASELINE_BITS,
                     compressed_bits_per_element: float = 1.0) -> float:
    """End-to-end communication volume reduction of a two-stage run whose
    first ``warmup_ratio`` of steps communicate uncompressed."""
    if not 0.0 <= warmup_ratio <= 1.0:
        raise ValueError(f"warmup_ratio must lie in [0, 1], got {warmup_ratio}")
    return 1.0 / (warmup_ratio + (1.0 - warmup_ratio) * compressed_bits_per_element / baseline_bits)


def _average(parts: list[np.ndarray]) -> np.ndarray:
    # fixed ascending-index summation order; shared by both collectives so the
    # identity-compressor path reproduces the lossless path bit for bit
    total = parts[0].copy()
    for p in parts[1:]:
        total += p
    return total / len(parts)


class SimCluster:
    """``n`` simulated workers sharing a volume ledger.

    Worker ``i`` keeps a residual for the whole buffer (gather phase) and a
    residual for chunk ``i`` in its server role. Residual buffers are sized on
    the first compressed collective and every later call must use the same
    length.
    """

    def __init__(self, n: int, compressor: Compressor | None = None,
                 baseline_bits: int = BASELINE_BITS, keep_history: bool = False):
        if n < 1:
            raise ValueError("a cluster needs at least one worker")
        self.n = n
        self.compressor = compressor if compressor is not None else OneBitCompressor()
        self.baseline_bits = baseline_bits
        self.keep_history = keep_history
        self.ledger = VolumeLedger()
        self.step_counter = 0
        self.d: int | None = None
        self.bounds: list[tuple[int, int]] = []
        self.worker_feedback: list[ErrorFeedback] = []
        self.server_feedback: list[ErrorFeedback] = []

    def prepare(self, d: int) -> None:
        if self.d is not None:
            if d != self.d:
                raise DimensionError(f"cluster buffers hold {self.d} elements, got {d}")
            return
        self.d = d
        self.bounds = chunk_bounds(d, self.n)
        self.worker_feedback = [ErrorFeedback.zeros(d, self.keep_history) for _ in range(self.n)]
        self.server_feedback = [ErrorFeedback.zeros(hi - lo, self.keep_history) for lo, hi in self.bounds]

    def endpoints(self) -> list[tuple[str, ErrorFeedback]]:
        """Every residual buffer with a label (``worker<i>`` / ``server<j>``)."""
        return ([(f"worker{i}", fb) for i, fb in enumerate(self.worker_feedback)]
                + [(f"server{j}", fb) for j, fb in enumerate(self.server_feedback)])

    def server_delta(self) -> np.ndarray:
        """Server residuals reassembled into one buffer-length vector."""
        if self.d is None:
            return np.zeros(0)
        return np.concatenate([fb.delta for fb in self.server_feedback])

    def scale_feedback(self, factor: np.ndarray) -> None:
        """Multiply every residual elementwise by ``factor`` (buffer-length)."""
        if self.d is None:
            return
        factor = as_vector(factor)
        if factor.size != self.d:
            raise DimensionError(f"factor has {factor.size} elements, buffers have {self.d}")
        for fb in self.worker_feedback:
            fb.delta = fb.delta * factor
        for (lo, hi), fb in zip(self.bounds, self.server_feedback):
            fb.delta = fb.delta * factor[lo:hi]

    def _check_inputs(self, inputs) -> list[np.ndarray]:
        if len(inputs) != self.n:
            raise DimensionError(f"expected {self.n} worker inputs, got {len(inputs)}")
        vecs = [as_vector(v) for v in inputs]
        d = vecs[0].size
        for i, v in enumerate(vecs):
            if v.size != d:
                raise DimensionError(f"worker {i} sent {v.size} elements, worker 0 sent {d}")
            check_finite(v, f"worker {i} input")
        return vecs

    def compressed_allreduce(self, inputs) -> np.ndarray:
        vecs = self._check_inputs(inputs)
        d = vecs[0].size
        self.prepare(d)
        n, comp = self.n, self.compressor

        # gather: blocks[i][j] is worker i's compressed copy of chunk j
        blocks = []
        for i, v in enumerate(vecs):
            fb = self.worker_feedback[i]
            row = []
            for j, (lo, hi) in enumerate(self.bounds):
                chunk_fb = ErrorFeedback(fb.delta[lo:hi].copy())
                row.append(compress_with_feedback(v[lo:hi], chunk_fb, comp))
                _merge_chunk_stats(fb, chunk_fb, lo, hi)
            fb.calls += 1
            if fb.history is not None:
                fb.history.append(float(np.linalg.norm(fb.delta)))
            blocks.append(row)
            self.ledger.bits_gather += sum(b.nbits for j, b in enumerate(row) if j != i)

        # average + scatter
        out = np.empty(d)
        for j, (lo, hi) in enumerate(self.bounds):
            avg = _average([blocks[i][j].decompress() for i in range(n)])
            block = compress_with_feedback(avg, self.server_feedback[j], comp)
            out[lo:hi] = block.decompress()
            self.ledger.bits_scatter += (n - 1) * block.nbits

        self.ledger.bits_uncompressed_equivalent += 2 * (n - 1) * d * self.baseline_bits
        self.ledger.compressed_calls += 1
        return out

    def lossless_allreduce(self, inputs) -> np.ndarray:
        vecs = self._check_inputs(inputs)
        d = vecs[0].size
        charge = (self.n - 1) * d * self.baseline_bits
        self.ledger.bits_gather += charge
        self.ledger.bits_scatter += charge
        self.ledger.bits_uncompressed_equivalent += 2 * charge
        self.ledger.lossless_calls += 1
        return _average(vecs)


def _merge_chunk_stats(fb: ErrorFeedback, chunk_fb: ErrorFeedback, lo: int, hi: int) -> None:
    fb.delta[lo:hi] = chunk_fb.delta
    fb.max_input_inf = max(fb.max_input_inf, chunk_fb.max_input_inf)
    fb.max_delta_inf = max(fb.max_delta_inf, chunk_fb.max_delta_inf)
    fb.max_identity_error = max(fb.max_identity_error, chunk_fb.max_identity_error)


def compressed_allreduce(cluster: SimCluster, inputs) -> np.ndarray:
    """Error-compensated compressed average of per-worker vectors; the single
    returned array is what every worker receives."""
    return cluster.compressed_allreduce(inputs)


def lossless_allreduce(cluster: SimCluster, inputs) -> np.ndarray:
    return cluster.lossless_allreduce(inputs)
