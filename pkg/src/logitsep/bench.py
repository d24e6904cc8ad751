"""Forward-pass timing as a function of the number of classes.

Every row times the same randomly initialised backbone on random-noise
minibatches.  The full-logit time grows with ``k`` through the output layer;
the single-logit path reads one output column and should not.  Times are
per example (minibatch wall time divided by the minibatch size) and logits
only, without a softmax.
"""

from __future__ import annotations

import csv
import json
import math
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, UsageError
from .network import BatchNorm, Dense, MlpModel, features

DEFAULT_CLASSES = (1, 2**10, 2**14, 2**16, 2**18, int(2**18.5))
DEFAULT_HIDDEN = (2048, 2048, 256)
CSV_HEADER = ("classes", "time_per_example_s", "speedup")


@dataclass
class BenchConfig:
    input_dim: int = 512
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    classes: tuple[int, ...] = DEFAULT_CLASSES
    batch_size: int = 32
    repetitions: int = 100
    warmup: int = 10
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.classes = tuple(int(k) for k in self.classes)
        if self.repetitions < 10:
            raise DomainError(f"repetitions must be >= 10, got {self.repetitions}")
        if self.warmup < 0 or self.batch_size < 1 or self.input_dim < 1:
            raise DomainError("warmup must be >= 0; batch size and input width must be positive")
        if any(h < 1 for h in self.hidden):
            raise DomainError("hidden widths must be positive")
        if not self.classes or self.classes[0] != 1:
            raise DomainError("class counts must start with 1 (the single-logit row)")
        if list(self.classes) != sorted(set(self.classes)):
            raise DomainError("class counts must be strictly ascending")
        if self.dtype not in ("float32", "float64"):
            raise DomainError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        out["classes"] = list(self.classes)
        return out


@dataclass
class BenchRow:
    classes: int
    time_per_example_s: float
    std_s: float
    speedup: float
    single_time_per_example_s: float
    single_std_s: float
    samples: list[float] = field(default_factory=list)
    single_samples: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BenchReport:
    rows: list[BenchRow]
    environment: dict
    config: dict
    low_confidence: bool = False
    warnings: list[str] = field(default_factory=list)

    @property
    def classes(self) -> list[int]:
        return [r.classes for r in self.rows]

    @property
    def speedups(self) -> list[float]:
        return [r.speedup for r in self.rows]

    def row(self, k: int) -> BenchRow:
        for r in self.rows:
            if r.classes == k:
                return r
        raise KeyError(k)

    def to_dict(self) -> dict:
        return {
            "rows": [r.to_dict() for r in self.rows],
            "environment": dict(self.environment),
            "config": dict(self.config),
            "low_confidence": self.low_confidence,
            "warnings": list(self.warnings),
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for r in self.rows:
                writer.writerow([r.classes, repr(r.time_per_example_s), repr(r.speedup)])


def environment_record(dtype: str) -> dict:
    threads = {name: os.environ.get(name) for name in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")}
    pinned = [v for v in threads.values() if v is not None]
    cpus = os.cpu_count() or 1
    width = min(int(v) for v in pinned) if pinned and all(v.isdigit() for v in pinned) else cpus
    return {
        "hardware": f"{platform.machine()} {platform.processor() or 'unknown cpu'} ({cpus} logical cpus)",
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "float_width": 32 if dtype == "float32" else 64,
        "multi_threaded": width > 1,
        "thread_env": threads,
        "clock": "perf_counter",
        "clock_resolution_s": time.get_clock_info("perf_counter").resolution,
    }


def _backbone(config: BenchConfig, rng: np.random.Generator) -> tuple[list[Dense], list[BatchNorm]]:
    dt = np.dtype(config.dtype)
    dims = [config.input_dim, *config.hidden]
    layers, norms = [], []
    for a, b in zip(dims, dims[1:]):
        limit = math.sqrt(6.0 / (a + b))
        w = (rng.random((a, b), dtype=dt) * 2 - 1) * dt.type(limit)
        layers.append(Dense(w, np.zeros(b, dtype=dt)))
        ones, zeros = np.ones(b, dtype=dt), np.zeros(b, dtype=dt)
        norms.append(BatchNorm(ones, zeros, zeros.copy(), ones.copy()))
    return layers, norms


def _output_layer(fan_in: int, k: int, dtype: str, rng: np.random.Generator) -> Dense:
    dt = np.dtype(dtype)
    limit = math.sqrt(6.0 / (fan_in + k))
    return Dense((rng.random((fan_in, k), dtype=dt) * 2 - 1) * dt.type(limit), np.zeros(k, dtype=dt))


def _time(fn, x_batches: Sequence[np.ndarray], warmup: int) -> list[float]:
    for i in range(warmup):
        fn(x_batches[i % len(x_batches)])
    samples = []
    for x in x_batches:
        t0 = time.perf_counter()
        fn(x)
        samples.append(time.perf_counter() - t0)
    return samples


def _time_interleaved(fns, x_batches: Sequence[np.ndarray], warmup: int) -> list[list[float]]:
    for i in range(warmup):
        for fn in fns:
            fn(x_batches[i % len(x_batches)])
    samples: list[list[float]] = [[] for _ in fns]
    for x in x_batches:
        for fn, out in zip(fns, samples):
            t0 = time.perf_counter()
            fn(x)
            out.append(time.perf_counter() - t0)
    return samples


def run_bench(config: BenchConfig) -> BenchReport:
    """Time the full-logit and single-logit paths for every class count.

    The ``k == 1`` row is the single-logit baseline: its full-logit entry is
    the single-logit time, so its speedup is exactly 1.  Every other row
    also times the single-logit path against its own ``k``-wide model so
    the independence from ``k`` can be checked.  All output layers are held
    in memory at once (about 0.7 GB in float32 for the default sweep).
    """
    rng = np.random.default_rng(config.seed)
    hidden, norms = _backbone(config, rng)
    fan_in = hidden[-1].fan_out if hidden else config.input_dim
    dt = np.dtype(config.dtype)
    inputs = [rng.standard_normal((config.batch_size, config.input_dim)).astype(dt) for _ in range(config.repetitions)]
    env = environment_record(config.dtype)
    resolution = env["clock_resolution_s"]

    def single_path(model: MlpModel, j: int):
        w, b = model.out.weight[:, j], model.out.bias[j]
        return lambda x: features(model, x, "inference", "blas") @ w + b

    def full_path(model: MlpModel):
        w, b = model.out.weight, model.out.bias
        return lambda x: features(model, x, "inference", "blas") @ w + b

    models = [MlpModel(hidden, norms, _output_layer(fan_in, k, config.dtype, rng)) for k in config.classes]
    singles = [single_path(model, int(rng.integers(k))) for model, k in zip(models, config.classes)]
    # the single-logit path is timed round-robin over k so machine drift
    # spreads evenly across rows instead of landing on one class count
    single_times = _time_interleaved(singles, inputs, config.warmup)
    raw = []
    for k, model, single in zip(config.classes, models, single_times):
        full = single if k == 1 else _time(full_path(model), inputs, config.warmup)
        raw.append((k, full, single))
    del models, singles

    warnings = []
    per = config.batch_size
    base = float(np.mean(raw[0][1])) / per
    rows = []
    for k, full, single in raw:
        full_arr, single_arr = np.asarray(full) / per, np.asarray(single) / per
        mean = float(full_arr.mean())
        rows.append(
            BenchRow(
                classes=k,
                time_per_example_s=mean,
                std_s=float(full_arr.std(ddof=1)),
                speedup=1.0 if k == 1 else mean / base,
                single_time_per_example_s=float(single_arr.mean()),
                single_std_s=float(single_arr.std(ddof=1)),
                samples=full_arr.tolist(),
                single_samples=single_arr.tolist(),
            )
        )
        shortest = min(min(full), min(single))
        if resolution > 0.01 * shortest:
            warnings.append(f"k={k}: clock resolution {resolution:.3g}s exceeds 1% of a {shortest:.3g}s interval")
    return BenchReport(rows, env, config.to_dict(), low_confidence=bool(warnings), warnings=warnings)


# cost model


@dataclass(frozen=True)
class CostFit:
    fixed_cost: float
    per_class_cost: float
    r_squared: float

    def __iter__(self):
        return iter((self.fixed_cost, self.per_class_cost, self.r_squared))


def _line_fit(k: np.ndarray, t: np.ndarray) -> CostFit:
    if k.size < 3:
        raise DomainError(f"a cost fit needs at least 3 class counts, got {k.size}")
    if np.all(k == k[0]):
        raise DomainError("cannot fit a cost model: every class count is the same")
    design = np.column_stack([np.ones_like(k), k])
    (a, b), *_ = np.linalg.lstsq(design, t, rcond=None)
    resid = t - (a + b * k)
    total = float(np.sum((t - t.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / total if total > 0 else 1.0
    return CostFit(float(a), float(b), r2)


def fit_line(classes: Sequence[float], times: Sequence[float]) -> CostFit:
    """Least-squares ``time ~ a + b * k``."""
    k = np.asarray(classes, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    if k.shape != t.shape:
        raise DomainError("class counts and times must have the same length")
    return _line_fit(k, t)


def _rows(report: BenchReport, classes: Optional[Sequence[int]]) -> list[BenchRow]:
    if classes is None:
        return list(report.rows)
    return [report.row(k) for k in classes]


def fit_cost_model(report: BenchReport, classes: Optional[Sequence[int]] = None) -> CostFit:
    """Fit time per example against ``k`` over ``classes`` (default: every row)."""
    rows = _rows(report, classes)
    return fit_line([r.classes for r in rows], [r.time_per_example_s for r in rows])


def sign_test_positive_slope(report: BenchReport, classes: Optional[Sequence[int]] = None, single: bool = False) -> float:
    """One-sided sign test p-value for a positive per-class cost.

    Repetition ``i`` of every row gives one timing sweep; each sweep's fitted
    slope is a sign trial.
    """
    rows = _rows(report, classes)
    samples = np.array([r.single_samples if single else r.samples for r in rows])
    k = np.array([r.classes for r in rows], dtype=np.float64)
    n = samples.shape[1]
    positive = sum(_line_fit(k, samples[:, i]).per_class_cost > 0 for i in range(n))
    return sum(math.comb(n, x) for x in range(positive, n + 1)) / 2.0**n


@dataclass(frozen=True)
class SlopeTest:
    slope: float
    stderr: float
    t_stat: float
    relative_spread: float

    def flat(self, t_crit: float = 1.96) -> bool:
        return abs(self.t_stat) < t_crit


def single_logit_slope(report: BenchReport, classes: Optional[Sequence[int]] = None) -> SlopeTest:
    """Regression of single-logit time on ``k`` over all raw samples.

    ``relative_spread`` is (max - min) / min of the per-row mean times.
    """
    rows = _rows(report, classes)
    k = np.concatenate([np.full(len(r.single_samples), float(r.classes)) for r in rows])
    t = np.concatenate([np.asarray(r.single_samples) for r in rows])
    if np.all(k == k[0]):
        raise DomainError("cannot fit a slope: every class count is the same")
    kc = k - k.mean()
    sxx = float(np.sum(kc**2))
    slope = float(np.sum(kc * (t - t.mean())) / sxx)
    resid = t - t.mean() - slope * kc
    dof = max(t.size - 2, 1)
    stderr = math.sqrt(float(np.sum(resid**2)) / dof / sxx)
    means = [r.single_time_per_example_s for r in rows]
    spread = (max(means) - min(means)) / min(means)
    return SlopeTest(slope, stderr, slope / stderr if stderr > 0 else 0.0, spread)


def is_monotone(values: Sequence[float]) -> bool:
    return all(b >= a for a, b in zip(values, values[1:]))


def parse_classes(text: str) -> tuple[int, ...]:
    """``"1,1024,2^14"`` -> ``(1, 1024, 16384)``; fractional powers are truncated."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "^" in part:
                base, exp = part.split("^", 1)
                out.append(int(float(base) ** float(exp)))
            else:
                out.append(int(part))
        except ValueError as exc:
            raise UsageError(f"bad class count {part!r}") from exc
    if not out:
        raise UsageError("no class counts given")
    return tuple(out)
