"""Small synthetic training problems with analytic gradients.

Every task exposes named flat parameter layers, a deterministic dataset drawn
from its seed, and ``loss`` / ``grad`` over a batch of sample indices
(``None`` means the whole dataset). ``step`` is passed through so tasks whose
data change over time (the variance-drift quadratic) can react to it.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

Params = Sequence[np.ndarray]


class GradientCheckError(AssertionError):
    pass


class Task:
    name = "task"
    layer_names: list[str]
    layer_shapes: list[tuple[int, ...]]
    n_samples: int

    def init_params(self, rng: np.random.Generator) -> list[np.ndarray]:
        raise NotImplementedError

    def loss(self, params: Params, idx=None, step: int = 0) -> float:
        raise NotImplementedError

    def grad(self, params: Params, idx=None, step: int = 0) -> list[np.ndarray]:
        raise NotImplementedError

    @property
    def layer_sizes(self) -> list[int]:
        return [int(np.prod(s)) for s in self.layer_shapes]

    def check_steps(self) -> list[int]:
        """Steps at which the gradient check probes the task."""
        return [0]

    def min_loss(self, step: int = 0) -> float | None:
        """Irreducible full-data loss when known in closed form."""
        return None


class QuadraticTask(Task):
    """Least-squares quadratic with a different curvature scale per layer.

    ``F(x; xi) = 1/2 * sum_l s_l^2 * sum_j h_lj (x_lj - x*_lj - xi_lj)^2``
    where ``xi`` is per-sample target noise (centred over the dataset). The
    full-data loss splits into an excess term and an irreducible floor,
    ``1/2 * sum s^2 h ((x - x*)^2 + var(xi))``, evaluated in O(d).

    The per-layer feature scale ``s_l`` is 1 until ``drift_step`` and
    ``drift_factors[l]`` afterwards, which shrinks that layer's gradients (and
    hence its true second moment) part-way through training.
    """

    name = "quadratic"

    def __init__(self, seed: int = 0, layer_sizes: Sequence[int] = (16, 32, 8, 64),
                 conditioning: float = 100.0, noise: float = 0.5, n_samples: int = 4096,
                 drift_step: int | None = None, drift_factors: Sequence[float] | None = None):
        rng = np.random.default_rng([seed, 1])
        L = len(layer_sizes)
        self.layer_names = [f"q{k}" for k in range(L)]
        self.layer_shapes = [(int(n),) for n in layer_sizes]
        self.n_samples = n_samples
        # layer curvature scales spread geometrically over [1, conditioning]
        spread = conditioning ** (np.arange(L) / max(L - 1, 1))
        self.h = [spread[k] * rng.uniform(0.5, 1.5, n) for k, n in enumerate(layer_sizes)]
        self.target = [rng.normal(0.0, 1.0, n) for n in layer_sizes]
        self.noise = []
        for n in layer_sizes:
            xi = noise * rng.normal(0.0, 1.0, (n_samples, n))
            self.noise.append(xi - xi.mean(axis=0))
        self.noise_var = [np.mean(xi * xi, axis=0) for xi in self.noise]
        self.drift_step = drift_step
        self.drift_factors = np.ones(L) if drift_factors is None else np.asarray(drift_factors, float)
        if self.drift_factors.size != L:
            raise ValueError("need one drift factor per layer")

    def init_params(self, rng):
        return [rng.normal(0.0, 1.0, n) for (n,) in self.layer_shapes]

    def feature_scale(self, k: int, step: int) -> float:
        if self.drift_step is not None and step >= self.drift_step:
            return float(self.drift_factors[k])
        return 1.0

    def loss(self, params, idx=None, step=0):
        total = 0.0
        for k, x in enumerate(params):
            s2 = self.feature_scale(k, step) ** 2
            d = x - self.target[k]
            if idx is None:
                total += 0.5 * s2 * float(self.h[k] @ (d * d + self.noise_var[k]))
            else:
                r = d - self.noise[k][idx]
                total += 0.5 * s2 * float(np.mean((r * r) @ self.h[k]))
        return total

    def min_loss(self, step: int = 0) -> float:
        """Irreducible full-data loss (at ``x = x*``)."""
        return sum(0.5 * self.feature_scale(k, step) ** 2 * float(self.h[k] @ self.noise_var[k])
                   for k in range(len(self.h)))

    def grad(self, params, idx=None, step=0):
        out = []
        for k, x in enumerate(params):
            s2 = self.feature_scale(k, step) ** 2
            mean_noise = 0.0 if idx is None else self.noise[k][idx].mean(axis=0)
            out.append(s2 * self.h[k] * (x - self.target[k] - mean_noise))
        return out

    def check_steps(self):
        return [0] if self.drift_step is None else [0, self.drift_step]


class LogisticTask(Task):
    """Binary logistic regression on linearly separable data with label noise."""

    name = "logistic"

    def __init__(self, seed: int = 0, dim: int = 20, n_samples: int = 4096, flip: float = 0.05):
        rng = np.random.default_rng([seed, 2])
        self.layer_names = ["w", "b"]
        self.layer_shapes = [(dim,), (1,)]
        self.n_samples = n_samples
        # features with unequal scales so per-coordinate adaptivity matters
        self.z = rng.normal(0.0, 1.0, (n_samples, dim)) * np.geomspace(0.2, 3.0, dim)
        w_true = rng.normal(0.0, 1.0, dim)
        b_true = 0.3
        y = np.sign(self.z @ w_true + b_true)
        y[y == 0] = 1.0
        flips = rng.random(n_samples) < flip
        y[flips] *= -1
        self.y = y

    def init_params(self, rng):
        return [rng.normal(0.0, 0.1, self.layer_shapes[0][0]), np.zeros(1)]

    def _margins(self, params, idx):
        w, b = params
        z = self.z if idx is None else self.z[idx]
        y = self.y if idx is None else self.y[idx]
        return z, y, y * (z @ w + b[0])

    def loss(self, params, idx=None, step=0):
        _, _, margin = self._margins(params, idx)
        return float(np.mean(np.logaddexp(0.0, -margin)))

    def grad(self, params, idx=None, step=0):
        z, y, margin = self._margins(params, idx)
        coef = -y * expit(-margin) / y.size
        return [z.T @ coef, np.array([coef.sum()])]


class MLPTask(Task):
    """Two-layer tanh network regressing a noisy random teacher (MSE loss)."""

    name = "mlp"

    def __init__(self, seed: int = 0, dim: int = 8, hidden: int = 16, n_samples: int = 2048,
                 noise: float = 0.1):
        rng = np.random.default_rng([seed, 3])
        self.dim, self.hidden = dim, hidden
        self.layer_names = ["W1", "b1", "W2", "b2"]
        self.layer_shapes = [(hidden, dim), (hidden,), (hidden,), (1,)]
        self.n_samples = n_samples
        self.z = rng.normal(0.0, 1.0, (n_samples, dim))
        teacher_w1 = rng.normal(0.0, 1.0 / np.sqrt(dim), (hidden, dim))
        teacher_w2 = rng.normal(0.0, 1.0, hidden)
        self.y = np.tanh(self.z @ teacher_w1.T) @ teacher_w2 + noise * rng.normal(0.0, 1.0, n_samples)

    def init_params(self, rng):
        return [
            rng.normal(0.0, 1.0 / np.sqrt(self.dim), self.hidden * self.dim),
            np.zeros(self.hidden),
            rng.normal(0.0, 1.0 / np.sqrt(self.hidden), self.hidden),
            np.zeros(1),
        ]

    def _forward(self, params, idx):
        W1 = params[0].reshape(self.hidden, self.dim)
        z = self.z if idx is None else self.z[idx]
        y = self.y if idx is None else self.y[idx]
        a = np.tanh(z @ W1.T + params[1])
        out = a @ params[2] + params[3][0]
        return z, y, a, out

    def loss(self, params, idx=None, step=0):
        _, y, _, out = self._forward(params, idx)
        return float(0.5 * np.mean((out - y) ** 2))

    def grad(self, params, idx=None, step=0):
        z, y, a, out = self._forward(params, idx)
        err = (out - y) / y.size
        g_w2 = a.T @ err
        g_b2 = np.array([err.sum()])
        back = np.outer(err, params[2]) * (1.0 - a * a)
        g_w1 = back.T @ z
        g_b1 = back.sum(axis=0)
        return [g_w1.ravel(), g_b1, g_w2, g_b2]


def drift_quadratic(seed: int = 0, drift_step: int = 300, drift_factor: float = 0.1,
                    noise: float = 0.5, n_samples: int = 4096) -> QuadraticTask:
    """Quadratic whose layers lose feature scale at ``drift_step``: layer ``k``
    is rescaled by ``drift_factor ** (k / (L - 1))``, so the first layer keeps
    its scale and the last shrinks the most."""
    sizes = (16, 32, 8, 64)
    L = len(sizes)
    factors = drift_factor ** (np.arange(L) / (L - 1))
    task = QuadraticTask(seed, sizes, noise=noise, n_samples=n_samples,
                         drift_step=drift_step, drift_factors=factors)
    task.name = "drift_quadratic"
    return task


def check_gradient(task: Task, probes: int = 100, rel_tol: float = 1e-5, seed: int = 0,
                   h: float = 1e-5, batch: int = 32) -> float:
    """Compare analytic directional derivatives with central differences.

    Each probe draws random parameters, a random batch and a random direction.
    Returns the worst relative error; raises :class:`GradientCheckError` when
    it exceeds ``rel_tol``.
    """
    rng = np.random.default_rng([seed, 99])
    worst = 0.0
    steps = task.check_steps()
    for p in range(probes):
        step = steps[p % len(steps)]
        params = task.init_params(rng)
        params = [x + rng.normal(0.0, 0.5, x.size) for x in params]
        idx = rng.choice(task.n_samples, size=min(batch, task.n_samples), replace=False)
        direction = [rng.normal(0.0, 1.0, x.size) for x in params]
        analytic = sum(float(g @ d) for g, d in zip(task.grad(params, idx, step), direction))
        plus = [x + h * d for x, d in zip(params, direction)]
        minus = [x - h * d for x, d in zip(params, direction)]
        numeric = (task.loss(plus, idx, step) - task.loss(minus, idx, step)) / (2 * h)
        err = abs(analytic - numeric) / (max(abs(analytic), abs(numeric)) + 1e-10)
        worst = max(worst, err)
    if worst > rel_tol:
        raise GradientCheckError(f"{task.name}: worst relative gradient error {worst:.3g} > {rel_tol}")
    return worst


TASKS: dict[str, Callable[..., Task]] = {}


def register_task(name: str, factory: Callable[..., Task]) -> None:
    """Add a task factory; one instance is built and gradient-checked now."""
    check_gradient(factory(seed=0))
    TASKS[name] = factory


register_task("quadratic", QuadraticTask)
register_task("logistic", LogisticTask)
register_task("mlp", MLPTask)
register_task("drift_quadratic", drift_quadratic)
