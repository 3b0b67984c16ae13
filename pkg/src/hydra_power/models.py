"""Candidate power predictors.

* ``AnalyticalModel``: P = P_idle + (P_max - P_idle) * util**alpha, alpha in {0.5, 1, 2}.
* ``MlpModel``: fully connected 11-16-32-64-32-16-8-1 rectifier network that
  predicts a power scale factor from normalized statistics.
* ``moving_average_baseline``: history-only stand-in baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import MissingColumnError, ModelFormatError, TrainingDataError
from .stats import FeatureVector, NormalizationStats, rmse
from .trace import ServerProfile, StatSample, Trace, get_features

FORMAT_VERSION = 1
ALPHAS = (0.5, 1.0, 2.0)
LAYER_SIZES = (11, 16, 32, 64, 32, 16, 8, 1)
OUTPUT_CLAMP = (0.0, 1.2)


# ---------------------------------------------------------------------------
# Analytical
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnalyticalModel:
    alpha: float = 1.0
    kind = "analytical"

    def __post_init__(self):
        if self.alpha not in ALPHAS:
            raise ValueError(f"alpha must be one of {ALPHAS}, got {self.alpha}")
        object.__setattr__(self, "alpha", float(self.alpha))

    def predict_watts(self, sample: StatSample, profile: ServerProfile) -> float:
        u = sample.cpu_util_pct / 100.0
        return analytical_predict(self, profile, 1.0 if u > 1.0 else (0.0 if u < 0.0 else u))

    def predict_trace_watts(self, trace: Trace, profile: ServerProfile) -> np.ndarray:
        u = np.clip(trace.column("cpu_util_pct") / 100.0, 0.0, 1.0)
        return profile.idle_power_watts + profile.dynamic_range * u**self.alpha

    def to_doc(self) -> dict:
        return {"format_version": FORMAT_VERSION, "kind": self.kind, "alpha": self.alpha}


def analytical_predict(model: AnalyticalModel, profile: ServerProfile, cpu_util: float) -> float:
    if not 0.0 <= cpu_util <= 1.0:
        raise ValueError(f"cpu_util must be within [0, 1], got {cpu_util}")
    return profile.idle_power_watts + (profile.max_power_watts - profile.idle_power_watts) * cpu_util**model.alpha


def fit_alpha(trace: Trace, profile: ServerProfile) -> AnalyticalModel:
    """Pick the alpha with the lowest RMSE over the trace; ties go to alpha = 1."""
    if not trace.has_power():
        raise MissingColumnError("fit_alpha needs measured_power_watts on every sample")
    actual = trace.column("measured_power_watts")
    best = None
    for alpha in (1.0, 0.5, 2.0):
        model = AnalyticalModel(alpha)
        err = rmse(model.predict_trace_watts(trace, profile), actual)
        if best is None or err < best[0]:
            best = (err, model)
    return best[1]


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

def _relu(z):
    return np.maximum(z, 0.0)


@dataclass(frozen=True, eq=False)
class MlpModel:
    """Weights are stored as (fan_out, fan_in) matrices, so a layer computes ``W @ h + b``."""

    weights: tuple
    biases: tuple
    norm_stats: Optional[NormalizationStats] = None
    output_clamp: tuple = OUTPUT_CLAMP
    layer_sizes: tuple = field(default=LAYER_SIZES, init=False)
    kind = "mlp"

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=float) for w in self.weights)
        bs = tuple(np.array(b, dtype=float) for b in self.biases)
        n_layers = len(LAYER_SIZES) - 1
        if len(ws) != n_layers or len(bs) != n_layers:
            raise ModelFormatError(f"expected {n_layers} weight layers, got {len(ws)} weights and {len(bs)} biases")
        for i, (w, b) in enumerate(zip(ws, bs)):
            shape = (LAYER_SIZES[i + 1], LAYER_SIZES[i])
            if w.shape != shape:
                raise ModelFormatError(f"layer {i} weight shape {w.shape}, expected {shape}")
            if b.shape != (LAYER_SIZES[i + 1],):
                raise ModelFormatError(f"layer {i} bias shape {b.shape}, expected {(LAYER_SIZES[i + 1],)}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ModelFormatError(f"layer {i} has non-finite parameters")
            w.flags.writeable = False
            b.flags.writeable = False
        lo, hi = (float(v) for v in self.output_clamp)
        if not lo < hi:
            raise ModelFormatError(f"invalid output clamp {self.output_clamp}")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "output_clamp", (lo, hi))

    def __eq__(self, other):
        if not isinstance(other, MlpModel):
            return NotImplemented
        return (
            self.output_clamp == other.output_clamp
            and self.norm_stats == other.norm_stats
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )

    __hash__ = None

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def raw_output(self, X: np.ndarray) -> np.ndarray:
        """Unclamped network output for rows of normalized features (n, 11) -> (n,)."""
        return _forward(self.weights, self.biases, np.atleast_2d(X))[-1][:, 0]

    def predict_scale_batch(self, X: np.ndarray) -> np.ndarray:
        return np.clip(self.raw_output(X), *self.output_clamp)

    def _require_norm(self):
        if self.norm_stats is None:
            raise ModelFormatError("MLP has no normalization statistics; cannot consume raw samples")
        return self.norm_stats

    def scale_from_normalized(self, x: np.ndarray) -> float:
        """Clamped forward pass on a normalized (11,) array, without input checks."""
        ws, bs = self.weights, self.biases
        last = len(ws) - 1
        h = x
        for i in range(last):
            h = ws[i] @ h
            h += bs[i]
            np.maximum(h, 0.0, out=h)
        out = float(ws[last][0] @ h) + float(bs[last][0])
        lo, hi = self.output_clamp
        return lo if out < lo else (hi if out > hi else out)

    def predict_watts(self, sample: StatSample, profile: ServerProfile) -> float:
        x = self._require_norm().transform(np.array(get_features(sample), dtype=float))
        return profile.idle_power_watts + self.scale_from_normalized(x) * profile.dynamic_range

    def predict_trace_watts(self, trace: Trace, profile: ServerProfile) -> np.ndarray:
        X = self._require_norm().transform(trace.feature_matrix)
        return profile.idle_power_watts + self.predict_scale_batch(X) * profile.dynamic_range

    def to_doc(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "layer_sizes": list(LAYER_SIZES),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "norm_stats": None if self.norm_stats is None else self.norm_stats.to_doc(),
            "output_clamp": list(self.output_clamp),
            "hidden_activation": "relu",
            "output_activation": "identity",
        }


def mlp_init(seed: int, norm_stats: Optional[NormalizationStats] = None) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng([seed, 0])
    weights, biases = [], []
    for fan_in, fan_out in zip(LAYER_SIZES[:-1], LAYER_SIZES[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, (fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(tuple(weights), tuple(biases), norm_stats)


def mlp_forward(model: MlpModel, fv: FeatureVector) -> float:
    """Scale-factor prediction for one normalized feature vector, clamped to the output range."""
    if not fv.normalized:
        raise ValueError("mlp_forward requires a normalized feature vector")
    return model.scale_from_normalized(fv.values)


def _forward(weights, biases, X):
    """Batched forward pass returning every layer's activation, input first."""
    acts = [X]
    h = X
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w.T + b
        h = z if i == last else _relu(z)
        acts.append(h)
    return acts


def backprop(weights, biases, X, y):
    """Gradients of mean((raw_output - y)**2) with respect to every weight and bias."""
    acts = _forward(weights, biases, X)
    n = X.shape[0]
    delta = (2.0 / n) * (acts[-1] - y[:, None])
    gws = [None] * len(weights)
    gbs = [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        gws[i] = delta.T @ acts[i]
        gbs[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ weights[i]) * (acts[i] > 0.0)
    return gws, gbs


def mse_loss(weights, biases, X, y) -> float:
    d = _forward(weights, biases, X)[-1][:, 0] - y
    return float(d @ d) / len(d)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    validation_fraction: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be within [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass(frozen=True)
class LabeledExample:
    features: FeatureVector
    target_scale_factor: float


class TrainResult(NamedTuple):
    model: MlpModel
    loss_history: list
    validation_history: list
    initial_loss: float

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1] if self.loss_history else self.initial_loss

    @property
    def validation_loss(self) -> Optional[float]:
        return self.validation_history[-1] if self.validation_history else None


def train_mlp(
    data: Sequence[LabeledExample],
    config: TrainConfig = TrainConfig(),
    norm_stats: Optional[NormalizationStats] = None,
) -> TrainResult:
    """Mini-batch Adam on the mean squared scale-factor error.

    The loss is taken on the unclamped output; the clamp only applies at
    inference.  ``loss_history`` holds the full training-split MSE after each
    epoch.
    """
    if not data:
        raise TrainingDataError("no training examples")
    X = np.empty((len(data), LAYER_SIZES[0]))
    y = np.empty(len(data))
    for i, ex in enumerate(data):
        if not ex.features.normalized:
            raise TrainingDataError("features are not normalized", i)
        X[i] = ex.features.values
        y[i] = ex.target_scale_factor
    return train_mlp_arrays(X, y, config, norm_stats)


def train_mlp_arrays(X, y, config: TrainConfig = TrainConfig(), norm_stats=None) -> TrainResult:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[1] != LAYER_SIZES[0] or len(y) != len(X):
        raise TrainingDataError(f"expected X of shape (n, {LAYER_SIZES[0]}) and y of length n")
    if len(X) == 0:
        raise TrainingDataError("no training examples")
    bad = ~(np.all(np.isfinite(X), axis=1) & np.isfinite(y))
    if bad.any():
        raise TrainingDataError("non-finite feature or target", int(np.argmax(bad)))
    if len(X) < config.batch_size:
        raise TrainingDataError(f"{len(X)} examples is fewer than batch_size={config.batch_size}")

    init = mlp_init(config.seed, norm_stats)
    rng = np.random.default_rng([config.seed, 1])
    order = rng.permutation(len(X))
    n_val = int(round(config.validation_fraction * len(X)))
    n_val = min(n_val, len(X) - 1)
    val_idx, train_idx = order[:n_val], order[n_val:]
    Xt, yt = X[train_idx], y[train_idx]
    Xv, yv = X[val_idx], y[val_idx]

    ws = [w.copy() for w in init.weights]
    bs = [b.copy() for b in init.biases]
    params = ws + bs
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps, lr = config.adam_beta1, config.adam_beta2, config.adam_epsilon, config.learning_rate

    initial_loss = mse_loss(ws, bs, Xt, yt)
    history, val_history = [], []
    step = 0
    for _ in range(config.epochs):
        perm = rng.permutation(len(Xt))
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start:start + config.batch_size]
            gws, gbs = backprop(ws, bs, Xt[idx], yt[idx])
            step += 1
            c1 = 1.0 - b1**step
            c2 = 1.0 - b2**step
            for p, g, mi, vi in zip(params, gws + gbs, m, v):
                mi *= b1
                mi += (1.0 - b1) * g
                vi *= b2
                vi += (1.0 - b2) * g * g
                p -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
        history.append(mse_loss(ws, bs, Xt, yt))
        if n_val:
            val_history.append(mse_loss(ws, bs, Xv, yv))

    model = MlpModel(tuple(ws), tuple(bs), norm_stats) if config.epochs else init
    return TrainResult(model, history, val_history, initial_loss)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

GradFn = Callable[[Sequence[np.ndarray], Sequence[np.ndarray], np.ndarray, np.ndarray], tuple]


def _loss_and_pattern(ws, bs, X, y):
    acts = _forward(ws, bs, X)
    d = acts[-1][:, 0] - y
    return float(d @ d) / len(d), [a > 0.0 for a in acts[1:-1]]


def compare_gradients(
    model: MlpModel,
    example: LabeledExample,
    epsilon: float = 1e-5,
    n_params: int = 128,
    seed: int = 0,
    grad_fn: Optional[GradFn] = None,
):
    """Analytic vs. central-difference gradients of the single-example loss
    on a sample of parameters drawn from every weight and bias tensor.

    A parameter whose +-epsilon nudge flips any rectifier is a kink where the
    finite difference is meaningless; it is skipped and another one drawn.
    Returns ``(analytic, numeric)`` arrays of equal length.
    """
    grad_fn = grad_fn or backprop
    X = example.features.values[None, :]
    y = np.array([example.target_scale_factor])
    ws = [w.copy() for w in model.weights]
    bs = [b.copy() for b in model.biases]
    gws, gbs = grad_fn(ws, bs, X, y)
    _, base = _loss_and_pattern(ws, bs, X, y)
    tensors = ws + bs
    grads = list(gws) + list(gbs)
    rng = np.random.default_rng(seed)
    per_tensor = -(-n_params // len(tensors))
    analytic, numeric = [], []
    for p, g in zip(tensors, grads):
        flat = p.reshape(-1)
        g = np.asarray(g).reshape(-1)
        taken = 0
        for k in rng.permutation(flat.size):
            if taken == per_tensor:
                break
            orig = flat[k]
            flat[k] = orig + epsilon
            up, pat_up = _loss_and_pattern(ws, bs, X, y)
            flat[k] = orig - epsilon
            down, pat_down = _loss_and_pattern(ws, bs, X, y)
            flat[k] = orig
            if not all(np.array_equal(a, b) and np.array_equal(a, c) for a, b, c in zip(base, pat_up, pat_down)):
                continue
            numeric.append((up - down) / (2.0 * epsilon))
            analytic.append(float(g[k]))
            taken += 1
    return np.array(analytic), np.array(numeric)


def gradient_check(
    model: MlpModel,
    example: LabeledExample,
    epsilon: float = 1e-5,
    n_params: int = 128,
    seed: int = 0,
    grad_fn: Optional[GradFn] = None,
) -> float:
    """Max of |g_a - g_n| / max(|g_a|, |g_n|, 1e-8) over the sampled parameters."""
    ga, gn = compare_gradients(model, example, epsilon, n_params, seed, grad_fn)
    denom = np.maximum(np.maximum(np.abs(ga), np.abs(gn)), 1e-8)
    return float(np.max(np.abs(ga - gn) / denom))


# ---------------------------------------------------------------------------
# Baseline
# ---------------------------------------------------------------------------

def moving_average_baseline(window: int) -> Callable[[Sequence[float]], float]:
    if window < 1:
        raise ValueError("window must be >= 1")

    def predict(power_history: Sequence[float]) -> float:
        if len(power_history) == 0:
            raise ValueError("moving average of an empty history")
        tail = power_history[-window:]
        return float(sum(tail) / len(tail))

    return predict


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _check_version(doc):
    if not isinstance(doc, dict):
        raise ModelFormatError("model document must be a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format_version {version!r} (expected {FORMAT_VERSION})")


def model_from_doc(doc: dict):
    """Rebuild an analytical or MLP model from its JSON document."""
    _check_version(doc)
    kind = doc.get("kind")
    try:
        if kind == "analytical":
            return AnalyticalModel(float(doc["alpha"]))
        if kind == "mlp":
            sizes = tuple(doc.get("layer_sizes", LAYER_SIZES))
            if sizes != LAYER_SIZES:
                raise ModelFormatError(f"layer_sizes {list(sizes)} != {list(LAYER_SIZES)}")
            norm = doc.get("norm_stats")
            return MlpModel(
                tuple(np.array(w, dtype=float) for w in doc["weights"]),
                tuple(np.array(b, dtype=float) for b in doc["biases"]),
                None if norm is None else NormalizationStats.from_doc(norm),
                tuple(doc.get("output_clamp", OUTPUT_CLAMP)),
            )
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed {kind} model: {exc}") from None
    raise ModelFormatError(f"unknown model kind {kind!r}")
