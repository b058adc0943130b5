import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from onebit_lamb.compression import (
    CompressedBlock,
    ErrorFeedback,
    IdentityCompressor,
    OneBitCompressor,
    compress_1bit,
    compress_with_feedback,
    compressed_bits,
    decompress,
)
from onebit_lamb.numerics import DimensionError

vectors = arrays(np.float64, st.integers(1, 64), elements=st.floats(-1e3, 1e3, allow_nan=False))


def test_compress_example():
    block = compress_1bit([2.0, -1.0, 0.5, -0.5])
    assert block.signs.tolist() == [True, False, True, False]
    assert block.scale == 1.0
    np.testing.assert_array_equal(decompress(block), [1.0, -1.0, 1.0, -1.0])


def test_zero_vector_has_zero_scale():
    block = compress_1bit(np.zeros(3))
    assert block.scale == 0.0
    np.testing.assert_array_equal(decompress(block), np.zeros(3))


@given(st.floats(1e-200, 1e200), st.integers(1, 100), st.data())
def test_constant_magnitude_is_lossless(c, d, data):
    signs = data.draw(arrays(bool, d))
    v = np.where(signs, c, -c)
    np.testing.assert_array_equal(decompress(compress_1bit(v)), v)


def test_decompress_examples():
    block = CompressedBlock(np.packbits([True, False], bitorder="little"), 2.0, 2)
    np.testing.assert_array_equal(decompress(block), [2.0, -2.0])
    zero = CompressedBlock(np.packbits([True, False, True], bitorder="little"), 0.0, 3)
    np.testing.assert_array_equal(decompress(zero), np.zeros(3))


def test_block_rejects_negative_scale():
    with pytest.raises(ValueError):
        CompressedBlock(np.zeros(1, np.uint8), -1.0, 4)


@pytest.mark.parametrize("d, bits", [(1024, 1056), (0, 32), (16, 48)])
def test_compressed_bits(d, bits):
    assert compressed_bits(compress_1bit(np.ones(d))) == bits


def test_feedback_examples():
    fb = ErrorFeedback.zeros(1)
    np.testing.assert_array_equal(decompress(compress_with_feedback([0.3], fb)), [0.3])
    np.testing.assert_array_equal(fb.delta, [0.0])

    fb = ErrorFeedback.zeros(2)
    np.testing.assert_array_equal(decompress(compress_with_feedback([1.0, 0.0], fb)), [0.5, 0.5])
    np.testing.assert_array_equal(fb.delta, [0.5, -0.5])


def test_feedback_length_mismatch():
    with pytest.raises(DimensionError):
        compress_with_feedback([1.0, 2.0], ErrorFeedback.zeros(3))


@given(vectors)
def test_identity_compressor_keeps_residual_zero(v):
    fb = ErrorFeedback.zeros(v.size)
    for _ in range(3):
        out = decompress(compress_with_feedback(v, fb, IdentityCompressor()))
        np.testing.assert_array_equal(out, v)
        assert not fb.delta.any()


@settings(max_examples=200)
@given(vectors, st.integers(0, 2**32 - 1))
def test_compensation_identity_and_bounds(v, seed):
    rng = np.random.default_rng(seed)
    fb = ErrorFeedback(rng.normal(0, 1, v.size))
    before = fb.delta.copy()
    corrected = v + before
    decoded = decompress(compress_with_feedback(v, fb))
    eps = np.finfo(float).eps
    scale = np.maximum(np.abs(corrected), np.abs(decoded))
    assert np.all(np.abs(corrected - (decoded + fb.delta)) <= eps * scale)
    assert fb.max_identity_error <= eps
    # residual never exceeds the largest compressor input
    assert np.abs(fb.delta).max() <= np.abs(corrected).max() * (1 + 1e-15)
    nz = corrected != 0
    assert np.all(np.sign(decoded[nz]) == np.sign(corrected[nz]))


def test_zero_sign_encodes_positive():
    assert compress_1bit([0.0, -1.0]).signs.tolist() == [True, False]


def test_wire_format_round_trip():
    v = np.array([1.0, -2.0, 3.0, -4.0, 5.0, 6.0, -7.0, 8.0, -9.0])
    block = compress_1bit(v)
    raw = block.to_bytes()
    # 9 sign bits -> 2 bytes, then float32 scale
    assert len(raw) == 2 + 4
    # element 0 is the lowest bit of byte 0
    assert raw[0] == 0b10110101
    assert raw[1] == 0b0
    back = CompressedBlock.from_bytes(raw, 9)
    assert back.signs.tolist() == block.signs.tolist()
    assert back.scale == np.float32(block.scale)


def test_rms_scale_rule_is_pluggable():
    block = OneBitCompressor("rms").compress(np.array([3.0, -4.0]))
    assert block.scale == pytest.approx(np.sqrt(12.5))
