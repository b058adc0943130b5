"""Training loop, run configuration and metrics persistence.

A run is described by a :class:`RunConfig`, which reads from and writes to a
flat ``key = value`` text file (``#`` starts a comment). Keys are the
:class:`RunConfig` fields plus every :class:`~onebit_lamb.optimizers.HyperParams`
field; unknown keys are rejected.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .comm import SimCluster, VolumeLedger, volume_reduction
from .compression import make_compressor
from .optimizers import (
    OPTIMIZERS,
    ConfigError,
    HyperParams,
    LayerState,
    StepTrace,
    init_layers,
    make_optimizer,
)
from .tasks import TASKS, Task, check_gradient, drift_quadratic


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; ``records`` holds the good prefix."""

    def __init__(self, message: str, records: list):
        super().__init__(message)
        self.records = records


SCHEDULES = ("constant", "linear", "exp_step")


@dataclass
class RunConfig:
    name: str = ""
    task: str = "quadratic"
    n_workers: int = 4
    batch_size: int = 16
    optimizer: str = "onebit_lamb"
    compressor: str = "onebit"
    seed: int = 0
    # learning-rate schedule; ``lr`` is the peak rate
    schedule: str = "constant"
    lr_start: float = 1e-4
    lr_warmup_steps: int = 0
    lr_decay_factor: float = 0.9
    lr_decay_every: int = 250
    # task knobs (ignored by tasks that do not use them)
    noise: float = 0.5
    n_samples: int = 4096
    drift_step: int = -1  # -1: the first compression step
    drift_factor: float = 0.1
    baseline_bits: int = 16
    record_wallclock: bool = False
    output_dir: str = ""
    hp: HyperParams = field(default_factory=HyperParams)

    def validate(self) -> None:
        problems = []
        if self.task not in TASKS:
            problems.append(f"unknown task {self.task!r}; choose from {sorted(TASKS)}")
        if self.optimizer not in OPTIMIZERS:
            problems.append(f"unknown optimizer {self.optimizer!r}; choose from {sorted(OPTIMIZERS)}")
        if self.compressor not in ("onebit", "identity"):
            problems.append("compressor must be 'onebit' or 'identity'")
        if self.schedule not in SCHEDULES:
            problems.append(f"schedule must be one of {SCHEDULES}")
        if self.n_workers < 1 or self.batch_size < 1:
            problems.append("n_workers and batch_size must be >= 1")
        if self.schedule == "exp_step" and self.lr_start <= 0:
            problems.append("exp_step schedule needs lr_start > 0")
        if self.lr_decay_every < 1:
            problems.append("lr_decay_every must be >= 1")
        try:
            self.hp.validate()
        except ConfigError as exc:
            problems.append(str(exc))
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def label(self) -> str:
        return self.name or f"{self.task}/{self.optimizer}/{self.compressor}"

    def to_text(self) -> str:
        lines = []
        for key, value in _flat_items(self):
            lines.append(f"{key} = {_format_value(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        run_types = {f.name: f.type for f in fields(cls) if f.name != "hp"}
        hp_types = {f.name: f.type for f in fields(HyperParams)}
        run_kw, hp_kw = {}, {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in run_types:
                run_kw[key] = _parse_value(key, value, run_types[key])
            elif key in hp_types:
                hp_kw[key] = _parse_value(key, value, hp_types[key])
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        cfg = cls(**run_kw, hp=HyperParams(**hp_kw))
        cfg.validate()
        return cfg

    def replace(self, **changes) -> "RunConfig":
        """Copy with run or hyperparameter fields overridden."""
        hp_names = set(HyperParams.field_names())
        hp_changes = {k: v for k, v in changes.items() if k in hp_names}
        run_changes = {k: v for k, v in changes.items() if k not in hp_names}
        hp = HyperParams(**{**asdict(self.hp), **hp_changes})
        kw = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "hp"}
        kw.update(run_changes)
        return RunConfig(**kw, hp=hp)


def _flat_items(cfg: RunConfig):
    for f in fields(cfg):
        if f.name != "hp":
            yield f.name, getattr(cfg, f.name)
    for f in fields(cfg.hp):
        yield f.name, getattr(cfg.hp, f.name)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(key: str, value: str, type_name: str):
    try:
        if type_name == "bool":
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if type_name == "int":
            return int(value)
        if type_name == "float":
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {type_name}") from None


def load_config(path: str | Path) -> RunConfig:
    return RunConfig.from_text(Path(path).read_text())


def make_task(cfg: RunConfig) -> Task:
    """Build the configured task and run its gradient check."""
    if cfg.task == "drift_quadratic":
        drift_step = cfg.hp.warmup_steps if cfg.drift_step < 0 else cfg.drift_step
        task = drift_quadratic(cfg.seed, drift_step, cfg.drift_factor, cfg.noise, cfg.n_samples)
    elif cfg.task == "quadratic":
        task = TASKS["quadratic"](seed=cfg.seed, noise=cfg.noise, n_samples=cfg.n_samples)
    elif cfg.task == "logistic":
        task = TASKS["logistic"](seed=cfg.seed, n_samples=cfg.n_samples)
    else:
        task = TASKS[cfg.task](seed=cfg.seed)
    check_gradient(task, probes=20, seed=cfg.seed)
    return task


def make_schedule(cfg: RunConfig) -> Callable[[int], float]:
    peak, warm = cfg.hp.lr, cfg.lr_warmup_steps
    total = cfg.hp.total_steps
    if cfg.schedule == "constant":
        return lambda t: peak
    if cfg.schedule == "linear":
        def linear(t: int) -> float:
            if t < warm:
                return peak * (t + 1) / warm
            return peak * max(0.0, (total - t) / max(total - warm, 1))
        return linear

    def exp_step(t: int) -> float:
        # exponential ramp from lr_start to the peak, then step decay
        if t < warm:
            return cfg.lr_start * (peak / cfg.lr_start) ** (t / warm)
        return peak * cfg.lr_decay_factor ** ((t - warm) // cfg.lr_decay_every)
    return exp_step


def shard_batch(dataset_size: int, step: int, n_workers: int, per_worker_batch: int,
                order: np.ndarray | None = None) -> list[np.ndarray]:
    """Split the global batch of ``step`` into contiguous per-worker slices.

    The global batch is the ``step``-th consecutive window of ``order``
    (default ``0..dataset_size-1``), wrapping around the dataset.
    """
    global_batch = n_workers * per_worker_batch
    start = step * global_batch
    positions = np.arange(start, start + global_batch) % dataset_size
    idx = positions if order is None else np.asarray(order)[positions]
    return [idx[i * per_worker_batch:(i + 1) * per_worker_batch] for i in range(n_workers)]


@dataclass
class MetricsRecord:
    step: int
    stage: str
    lr: float
    loss: float
    c: dict
    r: dict
    ratio_raw: dict
    v_l2norm: dict
    delta_worker_l2: float
    delta_server_l2: float
    bits_cumulative: int
    wallclock: float = 0.0


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, str):
        return x
    return f"{float(x):.17g}"


def metrics_columns(layer_names: Sequence[str], wallclock: bool) -> list[str]:
    cols = ["step", "stage", "lr", "loss"]
    for key in ("c", "r", "ratio_raw", "v_l2norm"):
        cols += [f"{key}.{name}" for name in layer_names]
    cols += ["delta_worker_l2", "delta_server_l2", "bits_cumulative"]
    if wallclock:
        cols.append("wallclock")
    return cols


def _record_row(rec: MetricsRecord, layer_names: Sequence[str], wallclock: bool) -> list[str]:
    row = [_fmt(rec.step), rec.stage, _fmt(rec.lr), _fmt(rec.loss)]
    for key in ("c", "r", "ratio_raw", "v_l2norm"):
        row += [_fmt(getattr(rec, key)[name]) for name in layer_names]
    row += [_fmt(rec.delta_worker_l2), _fmt(rec.delta_server_l2), _fmt(rec.bits_cumulative)]
    if wallclock:
        row.append(_fmt(rec.wallclock))
    return row


def write_metrics_csv(path: Path, records: Sequence[MetricsRecord], layer_names: Sequence[str],
                      wallclock: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(metrics_columns(layer_names, wallclock))
        for rec in records:
            w.writerow(_record_row(rec, layer_names, wallclock))


@dataclass
class RunResult:
    config: RunConfig
    records: list[MetricsRecord]
    layers: list[LayerState]
    cluster: SimCluster
    traces: list[StepTrace]
    ledger_by_step: list[VolumeLedger]
    metrics_path: Path | None = None
    summary_path: Path | None = None
    trace_paths: dict = field(default_factory=dict)
    loss_floor: float | None = None

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss

    @property
    def ledger(self) -> VolumeLedger:
        return self.cluster.ledger

    @property
    def reduction_factor(self) -> float:
        return self.ledger.reduction_factor()

    def compressed_bits_per_element(self) -> float:
        """Measured wire bits per element over the compression-stage
        collectives (baseline bits when there were none)."""
        hp, n = self.config.hp, self.cluster.n
        compressed_steps = [t for t, tr in enumerate(self.traces) if tr.stage == "compression"]
        if not compressed_steps or n == 1:
            return float(self.config.baseline_bits)
        bits = sum(self.ledger_by_step[t].total_bits - (self.ledger_by_step[t - 1].total_bits if t else 0)
                   for t in compressed_steps)
        d = sum(layer.x.size for layer in self.layers)
        return bits / (len(compressed_steps) * 2 * (n - 1) * d)

    def closed_form_reduction(self) -> float:
        compressed = sum(tr.stage == "compression" for tr in self.traces)
        warmup_ratio = 1.0 - compressed / len(self.traces)
        return volume_reduction(warmup_ratio, self.config.baseline_bits, self.compressed_bits_per_element())

    def summary(self) -> dict:
        return {
            "name": self.config.label,
            "task": self.config.task,
            "optimizer": self.config.optimizer,
            "compressor": self.config.compressor,
            "n_workers": self.config.n_workers,
            "steps": len(self.records),
            "warmup_steps": self.config.hp.warmup_steps,
            "final_loss": self.final_loss,
            "loss_floor": self.loss_floor,
            "total_bits": self.ledger.total_bits,
            "bits_uncompressed_equivalent": self.ledger.bits_uncompressed_equivalent,
            "reduction_factor": self.reduction_factor,
            "closed_form_reduction": self.closed_form_reduction(),
            "compressed_bits_per_element": self.compressed_bits_per_element(),
            "collectives": self.ledger.calls,
            "compressed_collectives": self.ledger.compressed_calls,
            "metrics_csv": str(self.metrics_path) if self.metrics_path else None,
            "trace_files": {k: str(v) for k, v in self.trace_paths.items()},
        }


def run_training(cfg: RunConfig, output_dir: str | Path | None = None,
                 on_step: Callable[[int, list, SimCluster], None] | None = None) -> RunResult:
    """Run ``cfg`` end to end: warmup steps, then compression steps.

    Writes ``metrics.csv``, ``summary.json`` and ``config.txt`` into
    ``output_dir`` (or ``cfg.output_dir``) when one is given. ``on_step`` is
    called after every optimizer step with the step index, the layers and the
    cluster, for tests that want to inspect intermediate state.
    """
    cfg.validate()
    hp = cfg.hp
    task = make_task(cfg)
    rng = np.random.default_rng(cfg.seed)
    layers = init_layers(task.init_params(rng), task.layer_names)
    cluster = SimCluster(cfg.n_workers, make_compressor(cfg.compressor, cfg.baseline_bits), cfg.baseline_bits)
    opt = make_optimizer(cfg.optimizer, layers, hp)
    schedule = make_schedule(cfg)
    order = rng.permutation(task.n_samples)
    names = task.layer_names

    records: list[MetricsRecord] = []
    traces: list[StepTrace] = []
    ledgers: list[VolumeLedger] = []
    start = time.perf_counter()
    for t in range(hp.total_steps):
        lr = schedule(t)
        params = opt.params
        batches = shard_batch(task.n_samples, t, cfg.n_workers, cfg.batch_size, order)
        local_grads = [task.grad(params, idx, t) for idx in batches]
        trace = opt.step(local_grads, cluster, t, lr)
        loss = task.loss(opt.params, None, t)
        if not math.isfinite(loss):
            raise DivergenceError(f"{cfg.label}: loss became {loss} at step {t}", records)
        worker_l2 = max((float(np.linalg.norm(fb.delta)) for fb in cluster.worker_feedback), default=0.0)
        records.append(MetricsRecord(
            step=t, stage=trace.stage, lr=lr, loss=loss,
            c=dict(zip(names, trace.c)), r=dict(zip(names, trace.r)),
            ratio_raw=dict(zip(names, trace.ratio_raw)),
            v_l2norm={layer.name: float(np.linalg.norm(layer.v)) for layer in layers},
            delta_worker_l2=worker_l2,
            delta_server_l2=float(np.linalg.norm(cluster.server_delta())),
            bits_cumulative=cluster.ledger.total_bits,
            wallclock=time.perf_counter() - start,
        ))
        traces.append(trace)
        ledgers.append(cluster.ledger.snapshot())
        if on_step is not None:
            on_step(t, layers, cluster)

    result = RunResult(cfg, records, layers, cluster, traces, ledgers,
                       loss_floor=task.min_loss(hp.total_steps - 1))
    out = output_dir if output_dir is not None else (cfg.output_dir or None)
    if out is not None:
        write_outputs(result, Path(out))
    return result


def write_outputs(result: RunResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    names = [layer.name for layer in result.layers]
    result.metrics_path = out / "metrics.csv"
    write_metrics_csv(result.metrics_path, result.records, names, result.config.record_wallclock)
    (out / "config.txt").write_text(result.config.to_text())
    result.summary_path = out / "summary.json"
    result.summary_path.write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")


TRACE_COLUMNS = ["step", "stage", "c_t", "r_t", "ratio_raw", "v_l2norm"]


def trace_coefficients(cfg: RunConfig, output_dir: str | Path | None = None) -> RunResult:
    """Run training and write one ``trace_<layer>.csv`` per layer.

    Columns: ``step``, ``stage``, ``c_t`` (scaling coefficient), ``r_t``
    (scaling ratio, 1 during warmup), ``ratio_raw`` (``max(v_frozen / v)``
    before clipping, ``nan`` when undefined) and ``v_l2norm`` (L2 norm of the
    second moment).
    """
    out = Path(output_dir if output_dir is not None else (cfg.output_dir or "."))
    result = run_training(cfg, out)
    for layer in result.layers:
        path = out / f"trace_{layer.name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for rec in result.records:
                w.writerow([_fmt(rec.step), rec.stage, _fmt(rec.c[layer.name]), _fmt(rec.r[layer.name]),
                            _fmt(rec.ratio_raw[layer.name]), _fmt(rec.v_l2norm[layer.name])])
        result.trace_paths[layer.name] = path
    if result.summary_path is not None:
        result.summary_path.write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
    return result


def read_trace(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = {"stage": np.array([row["stage"] for row in rows])}
    for key in TRACE_COLUMNS:
        if key != "stage":
            cols[key] = np.array([float(row[key]) for row in rows])
    return cols


def validate_trace(path: str | Path, hp: HyperParams, tol: float = 1e-12) -> list[str]:
    """Re-check a trace file against the clipping rules; returns violations."""
    cols = read_trace(path)
    problems = []
    r_prev = 1.0
    for k, stage in enumerate(cols["stage"]):
        step, c, r = int(cols["step"][k]), cols["c_t"][k], cols["r_t"][k]
        if stage == "warmup":
            if not hp.c_min - tol <= c <= hp.c_max + tol:
                problems.append(f"step {step}: warmup c_t={c} outside [{hp.c_min}, {hp.c_max}]")
            if r != 1.0:
                problems.append(f"step {step}: warmup r_t={r} is not 1")
            continue
        if not hp.r_min - tol <= r <= hp.r_max + tol:
            problems.append(f"step {step}: r_t={r} outside [{hp.r_min}, {hp.r_max}]")
        if abs(r / r_prev - 1.0) > hp.r_threshold + tol:
            problems.append(f"step {step}: r_t={r} moved from {r_prev} by more than r_threshold")
        r_prev = r
    return problems


def compare(configs: Sequence[RunConfig], output_dir: str | Path | None = None) -> list[RunResult]:
    results = []
    for k, cfg in enumerate(configs):
        sub = None if output_dir is None else Path(output_dir) / f"{k:02d}_{cfg.label.replace('/', '_')}"
        results.append(run_training(cfg, sub))
    return results


def format_table(results: Sequence[RunResult]) -> str:
    """Side-by-side summary; ``excess`` is final loss minus the task's
    irreducible loss when the task knows it."""
    header = f"{'run':<36} {'final_loss':>14} {'excess':>12} {'total_bits':>14} {'reduction':>10}"
    lines = [header, "-" * len(header)]
    for res in results:
        excess = "-" if res.loss_floor is None else f"{res.final_loss - res.loss_floor:.6g}"
        lines.append(f"{res.config.label:<36} {res.final_loss:>14.6g} {excess:>12} "
                     f"{res.ledger.total_bits:>14d} {res.reduction_factor:>10.3f}")
    return "\n".join(lines)
