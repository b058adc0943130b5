"""Momentum fusion and per-layer momentum scaling.

All layer momenta are packed into one contiguous buffer so a step issues a
single collective. Because a 1-bit block shares one scale across everything
it covers, layers with very different momentum magnitudes are first
multiplied by fixed per-layer coefficients that bring them to a common
magnitude, and divided by the same coefficients after communication.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_SCALE_FLOOR = 1e-12


class LayoutError(ValueError):
    """Fused buffer and layout disagree."""


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int

    @property
    def stop(self) -> int:
        return self.offset + self.length


class FusedView:
    """A contiguous buffer plus the ``(name, offset, length)`` of each layer.

    ``layer(k)`` and :func:`unfuse` hand out numpy views, so writes through the
    fused buffer are visible per layer and vice versa.
    """

    def __init__(self, buffer: np.ndarray, layout: Sequence[Segment]):
        layout = list(layout)
        expected = 0
        for seg in layout:
            if seg.offset != expected or seg.length < 0:
                raise LayoutError(f"segment {seg.name!r} at offset {seg.offset}, expected {expected}")
            expected = seg.stop
        if buffer.ndim != 1 or buffer.size != expected:
            raise LayoutError(f"buffer has {buffer.size} elements, layout covers {expected}")
        self.buffer = buffer
        self.layout = layout

    @classmethod
    def empty(cls, lengths: Sequence[int], names: Sequence[str] | None = None) -> "FusedView":
        names = list(names) if names is not None else [str(k) for k in range(len(lengths))]
        layout, offset = [], 0
        for name, n in zip(names, lengths):
            layout.append(Segment(name, offset, int(n)))
            offset += int(n)
        return cls(np.zeros(offset), layout)

    def __len__(self) -> int:
        return len(self.layout)

    @property
    def offsets(self) -> list[int]:
        return [seg.offset for seg in self.layout]

    def layer(self, k: int) -> np.ndarray:
        seg = self.layout[k]
        return self.buffer[seg.offset:seg.stop]

    def segment_ids(self) -> np.ndarray:
        """Layer index of every buffer element."""
        return np.repeat(np.arange(len(self.layout)), [seg.length for seg in self.layout])


def fuse(layers: Sequence[np.ndarray], names: Sequence[str] | None = None) -> FusedView:
    view = FusedView.empty([np.size(a) for a in layers], names)
    for k, a in enumerate(layers):
        view.layer(k)[:] = np.ravel(a)
    return view


def unfuse(view: FusedView) -> list[np.ndarray]:
    if view.buffer.size != sum(seg.length for seg in view.layout):
        raise LayoutError("fused buffer was resized after construction")
    return [view.layer(k) for k in range(len(view))]


@dataclass(frozen=True)
class MomentumScales:
    coeffs: np.ndarray
    reference_scale: float

    def __post_init__(self):
        if not np.all(self.coeffs > 0):
            raise ValueError("momentum scale coefficients must be positive")
        self.coeffs.setflags(write=False)

    @classmethod
    def ones(cls, n_layers: int) -> "MomentumScales":
        return cls(np.ones(n_layers), 1.0)


def compute_scales(momenta: Sequence[np.ndarray], floor: float = DEFAULT_SCALE_FLOOR) -> MomentumScales:
    """Per-layer coefficient ``reference / mean|m_l|``, where ``reference`` is
    the average of the per-layer mean magnitudes."""
    mags = np.array([max(float(np.mean(np.abs(m))) if np.size(m) else 0.0, floor) for m in momenta])
    reference = float(np.mean(mags))
    return MomentumScales(reference / mags, reference)


def apply_scaling(view: FusedView, scales: MomentumScales) -> FusedView:
    """Multiply each layer of ``view`` in place by its coefficient."""
    _check(view, scales)
    for k in range(len(view)):
        view.layer(k)[:] *= scales.coeffs[k]
    return view


def remove_scaling(view: FusedView, scales: MomentumScales) -> FusedView:
    _check(view, scales)
    for k in range(len(view)):
        view.layer(k)[:] /= scales.coeffs[k]
    return view


def _check(view: FusedView, scales: MomentumScales) -> None:
    if len(scales.coeffs) != len(view):
        raise LayoutError(f"{len(scales.coeffs)} coefficients for {len(view)} layers")
