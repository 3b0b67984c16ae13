"""Pearson correlation, RMSE, correlation-threshold feature selection and
min-max normalization."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import HydraError, MissingColumnError, UndefinedCorrelationError
from .trace import FEATURE_NAMES, StatSample, Trace, get_features

N_FEATURES = len(FEATURE_NAMES)


def pearson(x, y) -> float:
    """Sample Pearson correlation coefficient, clipped to [-1, 1]."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"series must be 1-D and equal length, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise ValueError("pearson needs at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("zero variance series")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def rmse(pred, actual) -> float:
    pred = np.asarray(pred, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if pred.shape != actual.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {actual.shape}")
    if pred.size == 0:
        raise ValueError("rmse of empty series")
    d = pred - actual
    return math.sqrt(float(d @ d) / d.size)


@dataclass(frozen=True)
class CorrelationReport:
    correlations: tuple  # ((feature_name, r or None), ...); None = undefined
    threshold: float
    selected: tuple

    @property
    def undefined(self) -> tuple:
        return tuple(name for name, r in self.correlations if r is None)

    def to_csv(self) -> str:
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", "r", "selected"])
        chosen = set(self.selected)
        for name, r in self.correlations:
            w.writerow([name, "undefined" if r is None else repr(r), str(name in chosen).lower()])
        return buf.getvalue()


def select_features(trace: Trace, threshold: float = 0.70) -> CorrelationReport:
    """Correlate every statistic with measured power and keep those with |r| >= threshold."""
    if not trace.has_power():
        raise MissingColumnError("select_features needs measured_power_watts on every sample")
    if len(trace) < 2:
        raise HydraError("select_features needs at least 2 samples")
    power = trace.column("measured_power_watts")
    X = trace.feature_matrix
    correlations = []
    selected = []
    for j, name in enumerate(FEATURE_NAMES):
        try:
            r = pearson(X[:, j], power)
        except UndefinedCorrelationError:
            r = None
        correlations.append((name, r))
        if r is not None and abs(r) >= threshold:
            selected.append(name)
    return CorrelationReport(tuple(correlations), threshold, tuple(selected))


@dataclass(frozen=True, eq=False)
class NormalizationStats:
    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        mins = np.asarray(self.mins, dtype=float).copy()
        maxs = np.asarray(self.maxs, dtype=float).copy()
        if mins.shape != (N_FEATURES,) or maxs.shape != (N_FEATURES,):
            raise ValueError(f"normalization stats need {N_FEATURES} entries")
        if np.any(maxs < mins) or not (np.all(np.isfinite(mins)) and np.all(np.isfinite(maxs))):
            raise ValueError("normalization stats need finite max >= min")
        mins.flags.writeable = False
        maxs.flags.writeable = False
        constant = maxs == mins
        with np.errstate(over="ignore"):
            span = np.where(constant, 1.0, maxs - mins)
        if not np.all(np.isfinite(span)):
            raise ValueError("normalization span overflows")
        object.__setattr__(self, "mins", mins)
        object.__setattr__(self, "maxs", maxs)
        object.__setattr__(self, "constant", constant)
        object.__setattr__(self, "_span", span)
        object.__setattr__(self, "_any_constant", bool(constant.any()))

    def __eq__(self, other):
        if not isinstance(other, NormalizationStats):
            return NotImplemented
        return np.array_equal(self.mins, other.mins) and np.array_equal(self.maxs, other.maxs)

    __hash__ = None

    def to_doc(self) -> dict:
        return {"features": list(FEATURE_NAMES), "min": self.mins.tolist(), "max": self.maxs.tolist()}

    @classmethod
    def from_doc(cls, doc: dict) -> "NormalizationStats":
        return cls(np.array(doc["min"], dtype=float), np.array(doc["max"], dtype=float))

    def transform(self, X: np.ndarray) -> np.ndarray:
        """Normalize raw rows (n, 11) or a single row (11,)."""
        out = np.subtract(X, self.mins)
        out /= self._span  # not a reciprocal: 1/span overflows for subnormal spans
        np.maximum(out, 0.0, out=out)
        np.minimum(out, 1.0, out=out)
        if self._any_constant:
            out[..., self.constant] = 0.5
        return out

    def inverse(self, Z: np.ndarray) -> np.ndarray:
        return self.mins + np.asarray(Z, dtype=float) * (self.maxs - self.mins)


def fit_normalization(traces: Sequence[Trace]) -> NormalizationStats:
    X = np.vstack([t.feature_matrix for t in traces])
    if X.shape[0] == 0:
        raise HydraError("fit_normalization needs at least one sample")
    return NormalizationStats(X.min(axis=0), X.max(axis=0))


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        v = self.values
        if not isinstance(v, np.ndarray) or v.dtype != np.float64:
            v = np.asarray(v, dtype=float)
            object.__setattr__(self, "values", v)
        if v.shape != (N_FEATURES,):
            raise ValueError(f"feature vector needs {N_FEATURES} entries, got shape {v.shape}")
        if self.normalized and not (v.min() >= 0.0 and v.max() <= 1.0):
            raise ValueError("normalized feature vector has values outside [0, 1]")

    def __eq__(self, other):
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return self.normalized == other.normalized and np.array_equal(self.values, other.values)

    __hash__ = None


def raw_features(sample: StatSample) -> FeatureVector:
    return FeatureVector(np.array(get_features(sample), dtype=float), normalized=False)


def normalize(sample: StatSample, stats: NormalizationStats) -> FeatureVector:
    """Min-max scale to [0, 1], clamping out-of-range values; constant features map to 0.5."""
    return FeatureVector(stats.transform(np.array(get_features(sample), dtype=float)), True)


def denormalize(fv: FeatureVector, stats: NormalizationStats) -> np.ndarray:
    return stats.inverse(fv.values)
