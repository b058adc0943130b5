"""1-bit sign compression with error feedback.

A :class:`CompressedBlock` carries the bit-packed sign of every element plus a
single scale; it decodes to ``+scale`` / ``-scale``. :class:`ErrorFeedback`
holds the residual an endpoint carries from one compression to the next, so
that ``input + residual_before == decoded + residual_after`` at every call.

:class:`IdentityCompressor` is the lossless stand-in used as an oracle: with it
every residual stays exactly zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .numerics import DimensionError, as_vector, check_finite

SCALE_BITS = 32
BASELINE_BITS = 16
_TINY = np.finfo(np.float64).tiny


@dataclass(frozen=True, eq=False)
class CompressedBlock:
    """Signs (bit-packed, 1 = nonnegative) and one nonnegative scale."""

    packed: np.ndarray
    scale: float
    d: int

    def __post_init__(self):
        if self.scale < 0 or not np.isfinite(self.scale):
            raise ValueError(f"scale must be finite and >= 0, got {self.scale!r}")
        if self.packed.size != (self.d + 7) // 8:
            raise ValueError("packed sign length does not match d")
        self.packed.setflags(write=False)

    @property
    def signs(self) -> np.ndarray:
        return np.unpackbits(self.packed, count=self.d, bitorder="little").astype(bool)

    @property
    def nbits(self) -> int:
        return self.d + SCALE_BITS

    def decompress(self) -> np.ndarray:
        if self.scale == 0.0:
            return np.zeros(self.d)
        return np.where(self.signs, self.scale, -self.scale)

    def to_bytes(self) -> bytes:
        """Sign bits (little-endian within each byte, zero-padded to a byte
        boundary) followed by the scale as a little-endian float32."""
        return self.packed.tobytes() + struct.pack("<f", self.scale)

    @classmethod
    def from_bytes(cls, data: bytes, d: int) -> "CompressedBlock":
        nbytes = (d + 7) // 8
        if len(data) != nbytes + 4:
            raise ValueError(f"expected {nbytes + 4} bytes for d={d}, got {len(data)}")
        packed = np.frombuffer(data[:nbytes], dtype=np.uint8).copy()
        (scale,) = struct.unpack("<f", data[nbytes:])
        return cls(packed, float(scale), d)


@dataclass(frozen=True, eq=False)
class RawBlock:
    """Uncompressed payload produced by :class:`IdentityCompressor`."""

    values: np.ndarray
    bits_per_element: int = BASELINE_BITS

    def __post_init__(self):
        self.values.setflags(write=False)

    @property
    def d(self) -> int:
        return self.values.size

    @property
    def nbits(self) -> int:
        return self.d * self.bits_per_element

    def decompress(self) -> np.ndarray:
        return self.values.copy()


Block = Union[CompressedBlock, RawBlock]


def l1_mean_scale(v: np.ndarray) -> float:
    if not v.size:
        return 0.0
    a = np.abs(v)
    # rounding can push the mean outside [min, max]; clamping keeps
    # constant-magnitude inputs lossless
    return min(max(float(a.sum()) / a.size, float(a.min())), float(a.max()))


def rms_scale(v: np.ndarray) -> float:
    return float(np.linalg.norm(v) / np.sqrt(v.size)) if v.size else 0.0


SCALE_RULES: dict[str, Callable[[np.ndarray], float]] = {
    "l1_mean": l1_mean_scale,
    "rms": rms_scale,
}


def compress_1bit(v, scale_rule: Callable[[np.ndarray], float] = l1_mean_scale) -> CompressedBlock:
    """Encode ``v`` as its signs and a single scale (mean absolute value by
    default). Zero is encoded with a positive sign."""
    v = as_vector(v)
    check_finite(v, "compressor input")
    packed = np.packbits(v >= 0, bitorder="little")
    return CompressedBlock(packed, scale_rule(v), v.size)


def decompress(block: Block) -> np.ndarray:
    return block.decompress()


def compressed_bits(block: Block) -> int:
    """Wire size of ``block`` in bits: one bit per element plus a 32-bit scale
    for sign blocks, ``bits_per_element`` per element for raw blocks."""
    return block.nbits


class OneBitCompressor:
    name = "onebit"

    def __init__(self, scale_rule: str | Callable[[np.ndarray], float] = "l1_mean"):
        self.scale_rule = SCALE_RULES[scale_rule] if isinstance(scale_rule, str) else scale_rule

    def compress(self, v: np.ndarray) -> CompressedBlock:
        return compress_1bit(v, self.scale_rule)

    def __repr__(self):
        return f"OneBitCompressor(scale_rule={self.scale_rule.__name__})"


class IdentityCompressor:
    name = "identity"

    def __init__(self, bits_per_element: int = BASELINE_BITS):
        self.bits_per_element = bits_per_element

    def compress(self, v: np.ndarray) -> RawBlock:
        v = as_vector(v, copy=True)
        check_finite(v, "compressor input")
        return RawBlock(v, self.bits_per_element)

    def __repr__(self):
        return f"IdentityCompressor(bits_per_element={self.bits_per_element})"


Compressor = Union[OneBitCompressor, IdentityCompressor]


def make_compressor(kind: str, baseline_bits: int = BASELINE_BITS) -> Compressor:
    if kind in ("onebit", "1bit"):
        return OneBitCompressor()
    if kind == "identity":
        return IdentityCompressor(baseline_bits)
    raise ValueError(f"unknown compressor kind {kind!r}; expected 'onebit' or 'identity'")


@dataclass
class ErrorFeedback:
    """Residual carried by one compressing endpoint.

    Besides the residual itself, keeps running statistics that let callers
    audit every compression: the worst observed ``||input + delta||_inf``, the
    worst ``||delta||_inf``, and the worst relative violation of the
    compensation identity.
    """

    delta: np.ndarray
    calls: int = 0
    max_input_inf: float = 0.0
    max_delta_inf: float = 0.0
    max_identity_error: float = 0.0
    history: list | None = field(default=None, repr=False)

    @classmethod
    def zeros(cls, d: int, keep_history: bool = False) -> "ErrorFeedback":
        return cls(np.zeros(d), history=[] if keep_history else None)

    def __len__(self) -> int:
        return self.delta.size


def compress_with_feedback(v, fb: ErrorFeedback, compressor: Compressor | None = None) -> Block:
    """Compress ``v + fb.delta`` and replace ``fb.delta`` with the residual.

    After the call ``v + delta_before == decompress(result) + delta_after``
    up to one rounding per element.
    """
    compressor = compressor or OneBitCompressor()
    v = as_vector(v)
    if v.size != fb.delta.size:
        raise DimensionError(f"input has {v.size} elements, feedback buffer has {fb.delta.size}")
    corrected = v + fb.delta
    block = compressor.compress(corrected)
    decoded = block.decompress()
    new_delta = corrected - decoded

    fb.calls += 1
    if corrected.size:
        mag = np.abs(corrected)
        fb.max_input_inf = max(fb.max_input_inf, float(mag.max()))
        fb.max_delta_inf = max(fb.max_delta_inf, float(np.abs(new_delta).max()))
        np.maximum(mag, np.abs(decoded), out=mag)
        np.maximum(mag, _TINY, out=mag)
        err = np.abs(corrected - (decoded + new_delta))
        fb.max_identity_error = max(fb.max_identity_error, float((err / mag).max()))
    if fb.history is not None:
        fb.history.append(float(np.linalg.norm(new_delta)))
    fb.delta = new_delta
    return block
