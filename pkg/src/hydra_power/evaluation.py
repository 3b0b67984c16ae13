"""Accuracy reports binned by compute intensity, inference latency benchmark,
and wall-power vs. RAPL comparison."""

from __future__ import annotations

import csv
import io
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import HydraError, MissingColumnError, SampleValidationError
from .stats import pearson, rmse
from .trace import StatSample, Trace

MIN_BENCH_ITERATIONS = 1000


class Intensity(str, Enum):
    LOW = "low"
    MID = "mid"
    HIGH = "high"


def intensity_bin(sample: StatSample, low_max: float = 33.0, mid_max: float = 66.0) -> Intensity:
    u = sample.cpu_util_pct
    if u < low_max:
        return Intensity.LOW
    if u < mid_max:
        return Intensity.MID
    return Intensity.HIGH


@dataclass(frozen=True)
class BinStats:
    bin_name: str
    sample_count: int
    rmse_watts: float
    mean_abs_error_watts: float


@dataclass(frozen=True)
class EvalReport:
    overall_rmse_watts: float
    per_bin: tuple
    per_model_share: dict

    def to_doc(self) -> dict:
        return {
            "overall_rmse_watts": self.overall_rmse_watts,
            "per_bin": [asdict(b) for b in self.per_bin],
            "per_model_share": dict(self.per_model_share),
        }

    def to_csv(self) -> str:
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin", "sample_count", "rmse_watts", "mean_abs_error_watts"])
        for b in self.per_bin:
            w.writerow([b.bin_name, b.sample_count, repr(b.rmse_watts), repr(b.mean_abs_error_watts)])
        n = sum(b.sample_count for b in self.per_bin)
        w.writerow(["all", n, repr(self.overall_rmse_watts), ""])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'bin':<6} {'samples':>8} {'rmse_W':>10} {'mae_W':>10}"]
        for b in self.per_bin:
            rm = "-" if math.isnan(b.rmse_watts) else f"{b.rmse_watts:.3f}"
            ma = "-" if math.isnan(b.mean_abs_error_watts) else f"{b.mean_abs_error_watts:.3f}"
            lines.append(f"{b.bin_name:<6} {b.sample_count:>8} {rm:>10} {ma:>10}")
        lines.append(f"{'all':<6} {sum(b.sample_count for b in self.per_bin):>8} {self.overall_rmse_watts:>10.3f}")
        shares = ", ".join(f"{k}={v:.1%}" for k, v in sorted(self.per_model_share.items()))
        lines.append(f"model share: {shares}")
        return "\n".join(lines)


def evaluate(predictions: Sequence, trace: Trace, low_max: float = 33.0, mid_max: float = 66.0) -> EvalReport:
    """Overall and per-intensity-bin error of ``predictions`` against the trace's measured power.

    Empty bins report NaN errors and a zero count.
    """
    if len(predictions) != len(trace):
        raise HydraError(f"{len(predictions)} predictions for a trace of {len(trace)} samples")
    if not trace.has_power():
        raise MissingColumnError("evaluate needs measured_power_watts on every sample")
    pred = np.array([p.predicted_watts for p in predictions], dtype=float)
    actual = trace.column("measured_power_watts")
    bins = np.array([intensity_bin(s, low_max, mid_max).value for s in trace.samples])
    per_bin = []
    for b in Intensity:
        mask = bins == b.value
        n = int(mask.sum())
        if n:
            err = pred[mask] - actual[mask]
            per_bin.append(BinStats(b.value, n, rmse(pred[mask], actual[mask]), float(np.mean(np.abs(err)))))
        else:
            per_bin.append(BinStats(b.value, 0, math.nan, math.nan))
    counts = Counter(p.chosen_model for p in predictions)
    share = {k: v / len(predictions) for k, v in counts.items()}
    return EvalReport(rmse(pred, actual), tuple(per_bin), share)


@dataclass(frozen=True)
class ModelLatency:
    model_id: str
    mean_ns: float
    p50_ns: float
    p99_ns: float
    iterations: int


@dataclass(frozen=True)
class LatencyReport:
    per_model: tuple

    def by_id(self, model_id: str) -> ModelLatency:
        for m in self.per_model:
            if m.model_id == model_id:
                return m
        raise KeyError(model_id)

    def to_doc(self) -> dict:
        return {"per_model": [asdict(m) for m in self.per_model]}

    def to_csv(self) -> str:
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model_id", "mean_ns", "p50_ns", "p99_ns", "iterations"])
        for m in self.per_model:
            w.writerow([m.model_id, repr(m.mean_ns), repr(m.p50_ns), repr(m.p99_ns), m.iterations])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'model':<16} {'mean_ms':>10} {'p50_ms':>10} {'p99_ms':>10} {'iters':>8}"]
        for m in self.per_model:
            lines.append(
                f"{m.model_id:<16} {m.mean_ns / 1e6:>10.5f} {m.p50_ns / 1e6:>10.5f} "
                f"{m.p99_ns / 1e6:>10.5f} {m.iterations:>8}"
            )
        return "\n".join(lines)


def latency_bench(
    models: Sequence[tuple],
    inputs: Sequence,
    iterations: int = 10_000,
    warmup: int = 200,
) -> LatencyReport:
    """Time ``(model_id, predict)`` callables one call at a time over cycled inputs.

    After a warm-up pass the models are timed round-robin, one call each per
    iteration, so slow drift of the host affects all of them alike.  Every
    result is accumulated so no call can be skipped.  Run from a single
    thread; concurrent benchmarks in one process skew each other.
    """
    if iterations < MIN_BENCH_ITERATIONS:
        raise HydraError(f"iterations must be >= {MIN_BENCH_ITERATIONS}, got {iterations}")
    if not inputs:
        raise HydraError("latency_bench needs at least one input")
    if not models:
        raise HydraError("latency_bench needs at least one model")
    clock = time.perf_counter_ns
    n_in = len(inputs)
    predictors = [predict for _, predict in models]
    sinks = [0.0] * len(models)
    for j, predict in enumerate(predictors):
        for i in range(warmup):
            sinks[j] += predict(inputs[i % n_in])
    timings = np.empty((len(models), iterations), dtype=np.int64)
    for i in range(iterations):
        x = inputs[i % n_in]
        for j, predict in enumerate(predictors):
            t0 = clock()
            out = predict(x)
            timings[j, i] = clock() - t0
            sinks[j] += out
    results = []
    for j, (model_id, _) in enumerate(models):
        if not math.isfinite(sinks[j]):
            raise HydraError(f"{model_id} produced non-finite output during benchmark")
        row = timings[j]
        results.append(ModelLatency(
            model_id,
            float(row.mean()),
            float(np.percentile(row, 50)),
            float(np.percentile(row, 99)),
            iterations,
        ))
    return LatencyReport(tuple(results))


def rapl_ratio_report(trace: Trace):
    """Per-sample wall/RAPL ratio and the Pearson correlation between the two series."""
    if not trace.has_power():
        raise MissingColumnError("rapl_ratio_report needs measured_power_watts on every sample")
    if not trace.has_rapl():
        raise MissingColumnError("rapl_ratio_report needs rapl_watts on every sample")
    wall = trace.column("measured_power_watts")
    rapl = trace.column("rapl_watts")
    if np.any(rapl <= 0):
        i = int(np.argmax(rapl <= 0))
        raise SampleValidationError("rapl_watts", float(rapl[i]), f"must be positive (sample {i})")
    return wall / rapl, pearson(wall, rapl)


def rapl_ratio_csv(trace: Trace, ratio: np.ndarray) -> str:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["timestamp", "wall_watts", "rapl_watts", "ratio"])
    for s, r in zip(trace.samples, ratio):
        w.writerow([repr(s.timestamp), repr(s.measured_power_watts), repr(s.rapl_watts), repr(float(r))])
    return buf.getvalue()
