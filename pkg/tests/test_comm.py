import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from onebit_lamb.comm import SimCluster, chunk_bounds, volume_reduction
from onebit_lamb.compression import IdentityCompressor
from onebit_lamb.numerics import DimensionError


W0 = [1.0, -2.0, 3.0, 0.5]
W1 = [-1.0, -1.0, 2.0, 4.0]


def test_hand_worked_two_workers():
    cluster = SimCluster(2)
    out = cluster.compressed_allreduce([W0, W1])
    np.testing.assert_allclose(out, [0.75, -0.75, 2.375, 2.375], rtol=0, atol=1e-15)
    np.testing.assert_allclose(cluster.worker_feedback[0].delta, [-0.5, -0.5, 1.25, -1.25], atol=1e-15)
    np.testing.assert_allclose(cluster.worker_feedback[1].delta, [0, 0, -1, 1], atol=1e-15)
    np.testing.assert_allclose(cluster.server_delta(), [-0.5, -0.5, 0, 0], atol=1e-15)

    out = cluster.compressed_allreduce([W0, W1])
    np.testing.assert_allclose(out, [-1, -1, 1.5, 1.5], atol=1e-15)
    np.testing.assert_allclose(cluster.server_delta(), [0.75, -0.75, 1.25, -1.25], atol=1e-15)
    np.testing.assert_allclose(cluster.worker_feedback[0].delta, [-1, -1, 1.75, 1.75], atol=1e-15)
    np.testing.assert_allclose(cluster.worker_feedback[1].delta, [0, 0, -2, 2], atol=1e-15)


def _oracle_allreduce(inputs, worker_delta, server_delta):
    """List-based re-derivation: sign times mean magnitude per chunk."""
    n, d = len(inputs), len(inputs[0])
    c = -(-d // n)
    bounds = [(min(j * c, d), min((j + 1) * c, d)) for j in range(n)]

    def onebit(vals):
        if not vals:
            return []
        mags = [abs(v) for v in vals]
        s = min(max(sum(mags) / len(mags), min(mags)), max(mags))
        return [s if v >= 0 else -s for v in vals]

    decoded = [[0.0] * d for _ in range(n)]
    for i in range(n):
        for lo, hi in bounds:
            corrected = [inputs[i][k] + worker_delta[i][k] for k in range(lo, hi)]
            q = onebit(corrected)
            for k, (a, b) in enumerate(zip(corrected, q)):
                decoded[i][lo + k] = b
                worker_delta[i][lo + k] = a - b
    out = [0.0] * d
    for j, (lo, hi) in enumerate(bounds):
        avg = []
        for k in range(lo, hi):
            total = decoded[0][k]
            for i in range(1, n):
                total += decoded[i][k]
            avg.append(total / n + server_delta[j][k - lo])
        q = onebit(avg)
        for k, (a, b) in enumerate(zip(avg, q)):
            out[lo + k] = b
            server_delta[j][k] = a - b
    return out


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 23), st.integers(0, 2**32 - 1))
def test_matches_list_oracle_over_several_calls(n, d, seed):
    rng = np.random.default_rng(seed)
    cluster = SimCluster(n)
    wd = [[0.0] * d for _ in range(n)]
    sd = [[0.0] * (hi - lo) for lo, hi in chunk_bounds(d, n)]
    for _ in range(4):
        inputs = rng.normal(0, 1, (n, d))
        expected = _oracle_allreduce(inputs.tolist(), wd, sd)
        got = cluster.compressed_allreduce(list(inputs))
        np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-14)
        for i in range(n):
            np.testing.assert_allclose(cluster.worker_feedback[i].delta, wd[i], rtol=1e-12, atol=1e-14)


@settings(deadline=None)
@given(st.integers(1, 8), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_identity_compressor_equals_lossless(n, d, seed):
    inputs = list(np.random.default_rng(seed).normal(0, 10, (n, d)))
    a = SimCluster(n, IdentityCompressor()).compressed_allreduce(inputs)
    b = SimCluster(n).lossless_allreduce(inputs)
    np.testing.assert_array_equal(a, b)


def test_lossless_average_example():
    out = SimCluster(3).lossless_allreduce([[3.0], [6.0], [9.0]])
    assert out.tolist() == [6.0]


def test_single_worker_sends_nothing():
    cluster = SimCluster(1)
    out = cluster.compressed_allreduce([[2.0, -2.0]])
    np.testing.assert_array_equal(out, [2.0, -2.0])
    assert cluster.ledger.total_bits == 0
    assert cluster.ledger.reduction_factor() == 1.0


@pytest.mark.parametrize("d, n, expected", [
    (10, 4, [(0, 3), (3, 6), (6, 9), (9, 10)]),
    (2, 4, [(0, 1), (1, 2), (2, 2), (2, 2)]),
    (8, 2, [(0, 4), (4, 8)]),
])
def test_chunk_bounds(d, n, expected):
    assert chunk_bounds(d, n) == expected


def test_empty_chunks_are_handled():
    cluster = SimCluster(4)
    out = cluster.compressed_allreduce([[1.0, -1.0]] * 4)
    np.testing.assert_array_equal(out, [1.0, -1.0])


def test_ledger_counts():
    n, d = 4, 10
    cluster = SimCluster(n)
    cluster.compressed_allreduce(list(np.ones((n, d))))
    # chunk sizes 3,3,3,1: each worker ships 3 foreign chunks, each chunk is scattered n-1 times
    per_chunk = [s + 32 for s in (3, 3, 3, 1)]
    gather = sum(sum(b for j, b in enumerate(per_chunk) if j != i) for i in range(n))
    assert cluster.ledger.bits_gather == gather
    assert cluster.ledger.bits_scatter == (n - 1) * sum(per_chunk)
    assert cluster.ledger.bits_uncompressed_equivalent == 2 * (n - 1) * d * 16
    cluster.lossless_allreduce(list(np.ones((n, d))))
    assert cluster.ledger.compressed_calls == 1 and cluster.ledger.lossless_calls == 1
    assert cluster.ledger.bits_uncompressed_equivalent == 4 * (n - 1) * d * 16


def test_dimension_is_fixed_after_first_call():
    cluster = SimCluster(2)
    cluster.compressed_allreduce([[1.0, 2.0], [3.0, 4.0]])
    with pytest.raises(DimensionError):
        cluster.compressed_allreduce([[1.0], [2.0]])
    with pytest.raises(DimensionError):
        cluster.compressed_allreduce([[1.0, 2.0]])


def test_deterministic():
    inputs = list(np.random.default_rng(3).normal(size=(4, 33)))
    a, b = SimCluster(4), SimCluster(4)
    for _ in range(5):
        np.testing.assert_array_equal(a.compressed_allreduce(inputs), b.compressed_allreduce(inputs))


@pytest.mark.parametrize("ratio, expected", [(0.167, 4.565), (0.193, 4.108), (0.0, 16.0), (1.0, 1.0)])
def test_volume_reduction(ratio, expected):
    assert volume_reduction(ratio, 16) == pytest.approx(expected, abs=1e-3)


def test_volume_reduction_rejects_bad_ratio():
    with pytest.raises(ValueError):
        volume_reduction(1.5)


@given(st.floats(0, 1), st.floats(0, 1))
def test_volume_reduction_monotone(a, b):
    lo, hi = sorted((a, b))
    assert volume_reduction(hi) <= volume_reduction(lo) * (1 + 1e-12)
    assert math.isfinite(volume_reduction(a))


@given(arrays(np.float64, (3, 7), elements=st.floats(-100, 100)))
def test_scale_feedback(inputs):
    cluster = SimCluster(3)
    cluster.compressed_allreduce(list(inputs))
    before = [fb.delta.copy() for fb in cluster.worker_feedback]
    server = cluster.server_delta()
    factor = np.linspace(0.5, 2.0, 7)
    cluster.scale_feedback(factor)
    for fb, old in zip(cluster.worker_feedback, before):
        np.testing.assert_array_equal(fb.delta, old * factor)
    np.testing.assert_array_equal(cluster.server_delta(), server * factor)


def test_identity_two_workers_example():
    cluster = SimCluster(2, IdentityCompressor())
    np.testing.assert_array_equal(cluster.compressed_allreduce([[1.0, 2.0], [3.0, 4.0]]), [2.0, 3.0])
    assert all(not fb.delta.any() for _, fb in cluster.endpoints())


@given(st.integers(1, 8), st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_lossless_matches_summing_oracle(n, d, seed):
    inputs = np.random.default_rng(seed).normal(0, 1, (n, d))
    got = SimCluster(n).lossless_allreduce(list(inputs))
    expected = np.array([sum(inputs[i, k] for i in range(n)) / n for k in range(d)])
    bound = n * np.spacing(np.abs(inputs).max(axis=0))
    assert np.all(np.abs(got - expected) <= bound)
