"""LAMB, 1-bit LAMB and the baselines it is compared against.

All optimizers keep one :class:`LayerState` per parameter tensor. The
functional steps (``lamb_step``, ``onebit_lamb_compressed_step``, ...) do the
math; the classes at the bottom wire them to a :class:`~onebit_lamb.comm.SimCluster`
so that a training loop only has to hand over per-worker gradients.

1-bit LAMB runs in two stages:

* warmup (``t < warmup_steps``): plain LAMB on losslessly averaged gradients,
  while tracking a decaying average ``c_avg`` of every layer's scaling
  coefficient. At the last warmup step the second moment is frozen and the
  momentum-scaling coefficients are computed.
* compression: each worker folds its local gradient into the shared momentum,
  the momenta are fused, scaled, averaged through the error-compensated 1-bit
  allreduce, unscaled and split back. The global gradient is recovered from
  consecutive momenta, a fresh second moment is kept up to date, and the ratio
  ``max(frozen / fresh)`` (clipped relative to the previous ratio, then into
  ``[r_min, r_max]``) rescales ``c_avg``. Parameters move along
  ``m / (sqrt(v_frozen) + eta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .comm import SimCluster
from .fusion import FusedView, MomentumScales, apply_scaling, compute_scales, fuse, remove_scaling, unfuse
from .numerics import (
    DEFAULT_RATIO_FLOOR,
    NonFiniteError,
    as_vector,
    clip,
    inf_norm_of_ratio,
    l2_norm,
)


class StageError(RuntimeError):
    """A compression-stage step ran before the warmup state was frozen."""


class ConfigError(ValueError):
    pass


@dataclass
class HyperParams:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    beta3: float = 0.9
    eta: float = 1e-6
    c_min: float = 0.01
    c_max: float = 0.3
    r_min: float = 0.5
    r_max: float = 4.0
    r_threshold: float = 0.1
    total_steps: int = 1000
    warmup_steps: int = 100
    weight_decay: float = 0.0
    ratio_floor: float = DEFAULT_RATIO_FLOOR
    scale_floor: float = 1e-12
    # multiply layer momenta by fixed per-layer coefficients before compressing
    momentum_scaling: bool = True
    # rescale carried residuals by c_{t-2}/c_{t-1} before each compression
    scaled_feedback: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        problems = []
        for name in ("beta1", "beta2", "beta3"):
            if not 0.0 <= getattr(self, name) < 1.0:
                problems.append(f"{name} must lie in [0, 1)")
        if self.eta <= 0:
            problems.append("eta must be positive")
        if self.c_min > self.c_max:
            problems.append("c_min must not exceed c_max")
        if self.r_min > self.r_max:
            problems.append("r_min must not exceed r_max")
        if not 0.0 < self.r_threshold < 1.0:
            problems.append("r_threshold must lie in (0, 1)")
        if not 0 <= self.warmup_steps <= self.total_steps:
            problems.append("need 0 <= warmup_steps <= total_steps")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        if self.ratio_floor <= 0 or self.scale_floor <= 0:
            problems.append("floors must be positive")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class LayerState:
    name: str
    x: np.ndarray
    m: np.ndarray
    v: np.ndarray
    v_frozen: np.ndarray | None = None
    c_avg: float = 0.0
    r_prev: float = 1.0
    m_prev: np.ndarray | None = None
    scale_coeff: float = 1.0
    # last two emitted scaling coefficients, newest first
    c_hist: list = field(default_factory=list)

    @classmethod
    def create(cls, name: str, x) -> "LayerState":
        x = as_vector(x, copy=True)
        return cls(name, x, np.zeros_like(x), np.zeros_like(x))

    @property
    def frozen(self) -> bool:
        return self.v_frozen is not None

    def _push_c(self, c: float) -> None:
        self.c_hist = [c] + self.c_hist[:1]


def init_layers(params: Sequence[np.ndarray], names: Sequence[str] | None = None) -> list[LayerState]:
    names = list(names) if names is not None else [f"layer{k}" for k in range(len(params))]
    return [LayerState.create(n, p) for n, p in zip(names, params)]


@dataclass
class StepTrace:
    """What one optimizer step decided, per layer."""

    t: int
    stage: str
    lr: float
    c: list[float]
    r: list[float]
    ratio_raw: list[float]


def _check_grad(g: np.ndarray, t: int, name: str, worker: int | None = None) -> None:
    if not np.all(np.isfinite(g)):
        where = f"layer {name!r}" + (f", worker {worker}" if worker is not None else "")
        bad = int(np.count_nonzero(~np.isfinite(g)))
        raise NonFiniteError(f"step {t}: non-finite gradient in {where} ({bad} of {g.size} elements)")


def lamb_coefficient(x_norm: float, u_norm: float, c_min: float, c_max: float) -> float:
    """``clip(||x|| / ||u||, c_min, c_max)``; a zero update norm maps to
    ``c_max`` (or to ``clip(1)`` when the parameters are zero too)."""
    if u_norm == 0.0:
        ratio = 1.0 if x_norm == 0.0 else math.inf
    else:
        ratio = x_norm / u_norm
    return clip(ratio, c_min, c_max)


def lamb_step(layers: Sequence[LayerState], grads: Sequence[np.ndarray], hp: HyperParams,
              t: int = 0, lr: float | None = None) -> list[float]:
    """One LAMB step on averaged gradients; returns each layer's coefficient."""
    lr = hp.lr if lr is None else lr
    cs = []
    for layer, g in zip(layers, grads):
        g = as_vector(g)
        _check_grad(g, t, layer.name)
        layer.m = hp.beta1 * layer.m + (1.0 - hp.beta1) * g
        layer.v = hp.beta2 * layer.v + (1.0 - hp.beta2) * g * g
        u = layer.m / (np.sqrt(layer.v) + hp.eta)
        if hp.weight_decay:
            u = u + hp.weight_decay * layer.x
        c = lamb_coefficient(l2_norm(layer.x), l2_norm(u), hp.c_min, hp.c_max)
        layer.x = layer.x - lr * c * u
        layer._push_c(c)
        cs.append(c)
    return cs


def onebit_lamb_warmup_step(layers: Sequence[LayerState], grads: Sequence[np.ndarray], hp: HyperParams,
                            t: int = 0, lr: float | None = None) -> list[float]:
    """LAMB step plus the ``c_avg`` update; freezes the warmup state when
    ``t`` is the last warmup step."""
    if t >= hp.warmup_steps:
        raise StageError(f"step {t} is past the warmup stage ({hp.warmup_steps} steps)")
    cs = lamb_step(layers, grads, hp, t, lr)
    for layer, c in zip(layers, cs):
        layer.c_avg = hp.beta3 * layer.c_avg + (1.0 - hp.beta3) * c
    if t == hp.warmup_steps - 1:
        finish_warmup(layers, hp)
    return cs


def finish_warmup(layers: Sequence[LayerState], hp: HyperParams, momentum_scaling: bool | None = None) -> None:
    """Freeze the second moment, snapshot the momentum, fix momentum scales."""
    use_scaling = hp.momentum_scaling if momentum_scaling is None else momentum_scaling
    scales = (compute_scales([layer.m for layer in layers], hp.scale_floor) if use_scaling
              else MomentumScales.ones(len(layers)))
    for layer, coeff in zip(layers, scales.coeffs):
        layer.v_frozen = layer.v.copy()
        layer.v_frozen.setflags(write=False)
        layer.m_prev = layer.m.copy()
        layer.scale_coeff = float(coeff)


def communicate_momentum(layers: Sequence[LayerState], local_grads: Sequence[Sequence[np.ndarray]],
                         hp: HyperParams, cluster: SimCluster, t: int = 0,
                         momentum_scaling: bool = True) -> list[np.ndarray]:
    """Local momentum update on every worker followed by one compressed
    allreduce of the fused (and optionally scaled) momenta."""
    names = [layer.name for layer in layers]
    scales = MomentumScales(np.array([layer.scale_coeff for layer in layers]), 1.0)
    buffers = []
    for i, grads in enumerate(local_grads):
        local = []
        for layer, g in zip(layers, grads):
            g = as_vector(g)
            _check_grad(g, t, layer.name, i)
            local.append(hp.beta1 * layer.m + (1.0 - hp.beta1) * g)
        view = fuse(local, names)
        if momentum_scaling:
            apply_scaling(view, scales)
        buffers.append(view.buffer)

    layout = view.layout
    if hp.scaled_feedback:
        factor = np.ones(len(layers))
        for k, layer in enumerate(layers):
            if len(layer.c_hist) == 2 and layer.c_hist[0] > 0:
                factor[k] = layer.c_hist[1] / layer.c_hist[0]
        cluster.scale_feedback(factor[view.segment_ids()])

    merged = FusedView(cluster.compressed_allreduce(buffers), layout)
    if momentum_scaling:
        remove_scaling(merged, scales)
    return [a.copy() for a in unfuse(merged)]


def reconstruct_gradient(m_t: np.ndarray, m_prev: np.ndarray, beta1: float) -> np.ndarray:
    """Invert the momentum recurrence ``m_t = beta1 * m_prev + (1 - beta1) * g``."""
    return (m_t - beta1 * m_prev) / (1.0 - beta1)


def _require_frozen(layers: Sequence[LayerState], t: int) -> None:
    for layer in layers:
        if not layer.frozen or layer.m_prev is None:
            raise StageError(f"step {t}: layer {layer.name!r} has no frozen warmup state")


def onebit_lamb_compressed_step(layers: Sequence[LayerState], local_grads, hp: HyperParams, t: int,
                                cluster: SimCluster, lr: float | None = None) -> StepTrace:
    lr = hp.lr if lr is None else lr
    _require_frozen(layers, t)
    momenta = communicate_momentum(layers, local_grads, hp, cluster, t, hp.momentum_scaling)
    cs, rs, raws = [], [], []
    for layer, m_t in zip(layers, momenta):
        g = reconstruct_gradient(m_t, layer.m_prev, hp.beta1)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"step {t}: reconstructed gradient of layer {layer.name!r} is not finite")
        layer.v = hp.beta2 * layer.v + (1.0 - hp.beta2) * g * g
        raw = inf_norm_of_ratio(layer.v_frozen, layer.v, hp.ratio_floor)
        r = clip(raw, (1.0 - hp.r_threshold) * layer.r_prev, (1.0 + hp.r_threshold) * layer.r_prev)
        r = clip(r, hp.r_min, hp.r_max)
        c = r * layer.c_avg
        update = m_t / (np.sqrt(layer.v_frozen) + hp.eta)
        if hp.weight_decay:
            update = update + hp.weight_decay * layer.x
        layer.x = layer.x - lr * c * update
        layer.m = m_t
        layer.m_prev = m_t.copy()
        layer.r_prev = r
        layer._push_c(c)
        cs.append(c)
        rs.append(r)
        raws.append(raw)
    return StepTrace(t, "compression", lr, cs, rs, raws)


def lamb_basic_1bit_step(layers: Sequence[LayerState], local_grads, hp: HyperParams, t: int,
                         cluster: SimCluster, lr: float | None = None) -> StepTrace:
    """Compression stage with both the second moment and the scaling
    coefficient frozen at their end-of-warmup values."""
    lr = hp.lr if lr is None else lr
    _require_frozen(layers, t)
    momenta = communicate_momentum(layers, local_grads, hp, cluster, t, hp.momentum_scaling)
    cs = []
    for layer, m_t in zip(layers, momenta):
        update = m_t / (np.sqrt(layer.v_frozen) + hp.eta)
        if hp.weight_decay:
            update = update + hp.weight_decay * layer.x
        layer.x = layer.x - lr * layer.c_avg * update
        layer.m = m_t
        layer.m_prev = m_t.copy()
        layer._push_c(layer.c_avg)
        cs.append(layer.c_avg)
    return StepTrace(t, "compression", lr, cs, [1.0] * len(cs), [math.nan] * len(cs))


def adam_step(layers: Sequence[LayerState], grads: Sequence[np.ndarray], hp: HyperParams,
              t: int = 0, lr: float | None = None) -> None:
    """Adam without bias correction, matching the LAMB moment recurrences."""
    lr = hp.lr if lr is None else lr
    for layer, g in zip(layers, grads):
        g = as_vector(g)
        _check_grad(g, t, layer.name)
        layer.m = hp.beta1 * layer.m + (1.0 - hp.beta1) * g
        layer.v = hp.beta2 * layer.v + (1.0 - hp.beta2) * g * g
        update = layer.m / (np.sqrt(layer.v) + hp.eta)
        if hp.weight_decay:
            update = update + hp.weight_decay * layer.x
        layer.x = layer.x - lr * update


def onebit_adam_step(layers: Sequence[LayerState], local_grads, hp: HyperParams, t: int,
                     cluster: SimCluster, lr: float | None = None) -> StepTrace:
    """Both stages of 1-bit Adam: Adam on averaged gradients during warmup,
    then compressed momentum with a frozen preconditioner."""
    lr = hp.lr if lr is None else lr
    n = len(layers)
    if t < hp.warmup_steps:
        adam_step(layers, allreduce_gradients(layers, local_grads, cluster, t), hp, t, lr)
        if t == hp.warmup_steps - 1:
            finish_warmup(layers, hp, momentum_scaling=False)
        return StepTrace(t, "warmup", lr, [1.0] * n, [1.0] * n, [math.nan] * n)
    if not all(layer.frozen for layer in layers):
        finish_warmup(layers, hp, momentum_scaling=False)
    momenta = communicate_momentum(layers, local_grads, hp, cluster, t, momentum_scaling=False)
    for layer, m_t in zip(layers, momenta):
        update = m_t / (np.sqrt(layer.v_frozen) + hp.eta)
        if hp.weight_decay:
            update = update + hp.weight_decay * layer.x
        layer.x = layer.x - lr * update
        layer.m = m_t
        layer.m_prev = m_t.copy()
    return StepTrace(t, "compression", lr, [1.0] * n, [1.0] * n, [math.nan] * n)


def allreduce_gradients(layers: Sequence[LayerState], local_grads, cluster: SimCluster, t: int = 0) -> list[np.ndarray]:
    """Average per-worker gradients with one lossless collective."""
    names = [layer.name for layer in layers]
    buffers = []
    for i, grads in enumerate(local_grads):
        for layer, g in zip(layers, grads):
            _check_grad(as_vector(g), t, layer.name, i)
        view = fuse(grads, names)
        buffers.append(view.buffer)
    merged = FusedView(cluster.lossless_allreduce(buffers), view.layout)
    return [a.copy() for a in unfuse(merged)]


class DataParallelOptimizer:
    """Drives one optimizer variant over a simulated cluster.

    ``step`` takes ``local_grads[worker][layer]`` and performs exactly one
    collective.
    """

    name = "base"
    two_stage = False

    def __init__(self, layers: Sequence[LayerState], hp: HyperParams):
        self.layers = list(layers)
        self.hp = hp

    def stage(self, t: int) -> str:
        return "compression" if self.two_stage and t >= self.hp.warmup_steps else "warmup"

    def step(self, local_grads, cluster: SimCluster, t: int, lr: float | None = None) -> StepTrace:
        raise NotImplementedError

    @property
    def params(self) -> list[np.ndarray]:
        return [layer.x for layer in self.layers]


class Lamb(DataParallelOptimizer):
    name = "lamb"

    def step(self, local_grads, cluster, t, lr=None):
        lr = self.hp.lr if lr is None else lr
        grads = allreduce_gradients(self.layers, local_grads, cluster, t)
        cs = lamb_step(self.layers, grads, self.hp, t, lr)
        n = len(cs)
        return StepTrace(t, "warmup", lr, cs, [1.0] * n, [math.nan] * n)


class Adam(DataParallelOptimizer):
    name = "adam"

    def step(self, local_grads, cluster, t, lr=None):
        lr = self.hp.lr if lr is None else lr
        adam_step(self.layers, allreduce_gradients(self.layers, local_grads, cluster, t), self.hp, t, lr)
        n = len(self.layers)
        return StepTrace(t, "warmup", lr, [1.0] * n, [1.0] * n, [math.nan] * n)


class OneBitLamb(DataParallelOptimizer):
    name = "onebit_lamb"
    two_stage = True
    compressed_step = staticmethod(onebit_lamb_compressed_step)

    def step(self, local_grads, cluster, t, lr=None):
        lr = self.hp.lr if lr is None else lr
        if t < self.hp.warmup_steps:
            grads = allreduce_gradients(self.layers, local_grads, cluster, t)
            cs = onebit_lamb_warmup_step(self.layers, grads, self.hp, t, lr)
            n = len(cs)
            return StepTrace(t, "warmup", lr, cs, [1.0] * n, [math.nan] * n)
        if not all(layer.frozen for layer in self.layers):
            # warmup_steps == 0: freeze the initial state
            finish_warmup(self.layers, self.hp)
        return self.compressed_step(self.layers, local_grads, self.hp, t, cluster, lr)


class LambBasic1Bit(OneBitLamb):
    name = "lamb_basic_1bit"
    compressed_step = staticmethod(lamb_basic_1bit_step)


class OneBitAdam(DataParallelOptimizer):
    name = "onebit_adam"
    two_stage = True

    def step(self, local_grads, cluster, t, lr=None):
        return onebit_adam_step(self.layers, local_grads, self.hp, t, cluster, lr)


OPTIMIZERS = {cls.name: cls for cls in (Lamb, OneBitLamb, LambBasic1Bit, OneBitAdam, Adam)}


def make_optimizer(name: str, layers: Sequence[LayerState], hp: HyperParams) -> DataParallelOptimizer:
    try:
        return OPTIMIZERS[name](layers, hp)
    except KeyError:
        raise ConfigError(f"unknown optimizer {name!r}; choose from {sorted(OPTIMIZERS)}") from None
