import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from onebit_lamb.numerics import (
    DimensionError,
    InvalidBoundsError,
    NonFiniteError,
    check_finite,
    clip,
    inf_norm_of_ratio,
    l2_norm,
)

finite = st.floats(-1e6, 1e6, allow_nan=False)


@pytest.mark.parametrize("x, expected", [(0.5, 0.3), (0.05, 0.05), (-1.0, 0.01)])
def test_clip_examples(x, expected):
    assert clip(x, 0.01, 0.3) == expected


def test_clip_rejects_reversed_bounds():
    with pytest.raises(InvalidBoundsError):
        clip(1.0, 2.0, 1.0)


@given(finite, finite, finite)
def test_clip_idempotent_and_in_range(x, a, b):
    a, b = min(a, b), max(a, b)
    y = clip(x, a, b)
    assert a <= y <= b
    assert clip(y, a, b) == y
    if a <= x <= b:
        assert y == x


@pytest.mark.parametrize("v, expected", [([3, 4], 5.0), ([0, 0, 0], 0.0), ([1, 1, 1, 1], 2.0)])
def test_l2_norm_examples(v, expected):
    assert l2_norm(np.array(v, float)) == expected


@given(arrays(np.float64, 16, elements=finite), arrays(np.float64, 16, elements=finite))
def test_l2_norm_triangle_inequality(a, b):
    assert l2_norm(a + b) <= (l2_norm(a) + l2_norm(b)) * (1 + 1e-12) + 1e-300


def test_inf_norm_of_ratio_examples():
    assert inf_norm_of_ratio([4.0, 1.0], [1.0, 1.0], 1e-12) == 4.0
    assert inf_norm_of_ratio([0.0, 0.0], [1.0, 2.0], 1e-12) == 0.0


def test_inf_norm_of_ratio_floors_zero_denominators():
    assert inf_norm_of_ratio([1.0], [0.0], 1e-3) == pytest.approx(1e3)


def test_inf_norm_of_ratio_length_mismatch():
    with pytest.raises(DimensionError):
        inf_norm_of_ratio([1.0, 2.0], [1.0], 1e-12)


@given(arrays(np.float64, st.integers(1, 32), elements=st.floats(1e-12, 1e6)))
def test_inf_norm_of_self_ratio_is_one(a):
    assert inf_norm_of_ratio(a, a, 1e-12) == 1.0


def test_check_finite():
    check_finite(np.array([1.0, 2.0]))
    with pytest.raises(NonFiniteError):
        check_finite(np.array([1.0, np.nan]))
