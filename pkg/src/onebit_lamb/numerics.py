"""Flat-vector helpers shared by the optimizer, compressor and collectives.

Everything operates on 1-D float64 numpy arrays.
"""

from __future__ import annotations

import numpy as np

DEFAULT_RATIO_FLOOR = 1e-12


class DimensionError(ValueError):
    """Raised when vectors that must agree in length do not."""


class InvalidBoundsError(ValueError):
    """Raised when a clip interval is empty (lower bound above upper bound)."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf reached an API boundary."""


def as_vector(values, copy: bool = False) -> np.ndarray:
    """Return ``values`` as a flat float64 array."""
    arr = np.array(values, dtype=np.float64, copy=copy) if copy else np.asarray(values, dtype=np.float64)
    return arr.reshape(-1)


def check_finite(v: np.ndarray, what: str = "vector") -> None:
    if not np.all(np.isfinite(v)):
        bad = np.flatnonzero(~np.isfinite(v))
        raise NonFiniteError(f"{what} has {bad.size} non-finite element(s), first at index {bad[0]}")


def check_same_length(*vectors: np.ndarray) -> int:
    lengths = {len(v) for v in vectors}
    if len(lengths) > 1:
        raise DimensionError(f"length mismatch: {sorted(lengths)}")
    return lengths.pop() if lengths else 0


def clip(x: float, a: float, b: float) -> float:
    """``min(max(x, a), b)``."""
    if a > b:
        raise InvalidBoundsError(f"clip bounds are reversed: a={a!r} > b={b!r}")
    return min(max(x, a), b)


def l2_norm(v) -> float:
    return float(np.linalg.norm(np.asarray(v, dtype=np.float64)))


def inf_norm_of_ratio(a, b, floor: float = DEFAULT_RATIO_FLOOR) -> float:
    """Largest element of ``a / max(b, floor)``.

    ``floor`` lower-bounds every denominator so transiently zero entries of a
    freshly accumulated second moment do not produce infinities.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_same_length(a, b)
    if floor <= 0:
        raise ValueError("floor must be positive")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a / np.maximum(b, floor))))


def axpy(alpha: float, x: np.ndarray, y: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """``alpha * x + y``; writes into ``out`` when given."""
    check_same_length(x, y)
    if out is None:
        return alpha * x + y
    np.multiply(x, alpha, out=out)
    out += y
    return out


def ema(prev: np.ndarray, new: np.ndarray, beta: float) -> np.ndarray:
    """``beta * prev + (1 - beta) * new`` (decaying average)."""
    check_same_length(prev, new)
    return beta * prev + (1.0 - beta) * new
