"""Hybrid predictor: a selector forest picks a candidate model per sample (or
every ``selection_interval`` samples) and the chosen model predicts power as a
scale factor of the server's idle-to-max range."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ModelFormatError
from .models import FORMAT_VERSION, MlpModel, model_from_doc
from .selector import CandidateSpec, SelectorForest, check_candidates
from .stats import NormalizationStats
from .trace import ServerProfile, StatSample, Trace, get_features


def watts_to_scale(p: float, profile: ServerProfile) -> float:
    return (p - profile.idle_power_watts) / (profile.max_power_watts - profile.idle_power_watts)


def scale_to_watts(sf: float, profile: ServerProfile) -> float:
    return profile.idle_power_watts + sf * (profile.max_power_watts - profile.idle_power_watts)


@dataclass(frozen=True, eq=False)
class HydraModel:
    candidates: tuple  # ((CandidateSpec, model), ...)
    forest: SelectorForest
    norm_stats: NormalizationStats
    profile: ServerProfile
    selection_interval: int = 1
    kind = "hydra"

    def __post_init__(self):
        cands = tuple((spec, model) for spec, model in self.candidates)
        object.__setattr__(self, "candidates", cands)
        if not cands:
            raise ConfigurationError("hydra model needs at least one candidate")
        check_candidates([s for s, _ in cands])
        if not (isinstance(self.selection_interval, int) and self.selection_interval >= 1):
            raise ConfigurationError(f"selection_interval must be an integer >= 1, got {self.selection_interval}")
        by_id = {spec.candidate_id: model for spec, model in cands}
        unknown = [cid for cid in self.forest.candidate_ids if cid not in by_id]
        if unknown:
            raise ConfigurationError(f"forest chooses unknown candidates {unknown}")
        object.__setattr__(self, "_by_id", by_id)
        object.__setattr__(self, "_dispatch", {cid: self._dispatcher(m) for cid, m in by_id.items()})

    def _dispatcher(self, predictor):
        """Callable ``(sample, normalized_x) -> (watts, scale_factor)`` for one candidate."""
        profile = self.profile
        if isinstance(predictor, MlpModel) and predictor.norm_stats in (None, self.norm_stats):
            # shares the selector's normalization: reuse its feature vector
            def run(sample, x):
                sf = predictor.scale_from_normalized(x)
                return scale_to_watts(sf, profile), sf
        else:
            def run(sample, x):
                watts = float(predictor.predict_watts(sample, profile))
                return watts, watts_to_scale(watts, profile)
        return run

    def model(self, candidate_id: str):
        try:
            return self._by_id[candidate_id]
        except KeyError:
            raise ConfigurationError(f"forest chose {candidate_id!r}, which is not a candidate") from None

    def __eq__(self, other):
        if not isinstance(other, HydraModel):
            return NotImplemented
        return (
            self.candidates == other.candidates
            and self.forest == other.forest
            and self.norm_stats == other.norm_stats
            and self.profile == other.profile
            and self.selection_interval == other.selection_interval
        )

    __hash__ = None

    def to_doc(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "profile": self.profile.to_doc(),
            "norm_stats": self.norm_stats.to_doc(),
            "selection_interval": self.selection_interval,
            "candidates": [
                {"id": spec.candidate_id, "overhead_rank": spec.overhead_rank, "model": model.to_doc()}
                for spec, model in self.candidates
            ],
            "forest": self.forest.to_doc(),
        }


class PowerPrediction(NamedTuple):
    timestamp: float
    predicted_watts: float
    scale_factor: float
    chosen_model: str
    selector_invoked: bool


@dataclass
class SelectionState:
    """Per-stream state: samples seen and the cached choice."""

    counter: int = 0
    choice: Optional[str] = None


def hydra_predict(model: HydraModel, sample: StatSample, state: SelectionState) -> PowerPrediction:
    """Predict one sample, invoking the selector every ``selection_interval`` samples.

    The analytical candidate reads raw utilization; MLP candidates consume the
    normalized statistics.
    """
    x = model.norm_stats.transform(np.array(get_features(sample), dtype=float))
    invoked = state.counter % model.selection_interval == 0 or state.choice is None
    if invoked:
        forest = model.forest
        state.choice = forest.candidate_ids[forest.votes(x).argmax()]
    state.counter += 1
    try:
        run = model._dispatch[state.choice]
    except KeyError:
        raise ConfigurationError(f"forest chose {state.choice!r}, which is not a candidate") from None
    watts, sf = run(sample, x)
    return PowerPrediction(sample.timestamp, watts, sf, state.choice, invoked)


def run_over_trace(model: HydraModel, trace: Trace) -> list:
    state = SelectionState()
    return [hydra_predict(model, s, state) for s in trace.samples]


def run_single_model(model, trace: Trace, profile: ServerProfile, candidate_id: Optional[str] = None) -> list:
    """Predictions from one candidate model applied to every sample."""
    cid = candidate_id or model.kind
    watts = model.predict_trace_watts(trace, profile)
    return [
        PowerPrediction(s.timestamp, float(w), watts_to_scale(float(w), profile), cid, False)
        for s, w in zip(trace.samples, watts)
    ]


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def hydra_from_doc(doc: dict) -> HydraModel:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format_version {doc.get('format_version')!r} (expected {FORMAT_VERSION})")
    if doc.get("kind") != "hydra":
        raise ModelFormatError(f"expected kind 'hydra', got {doc.get('kind')!r}")
    try:
        candidates = tuple(
            (CandidateSpec(str(c["id"]), int(c["overhead_rank"])), model_from_doc(c["model"]))
            for c in doc["candidates"]
        )
        return HydraModel(
            candidates,
            SelectorForest.from_doc(doc["forest"]),
            NormalizationStats.from_doc(doc["norm_stats"]),
            ServerProfile.from_doc(doc["profile"]),
            int(doc.get("selection_interval", 1)),
        )
    except (ModelFormatError, ConfigurationError):
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed hydra model: {exc!r}") from None


def load_any_model(doc_or_path):
    """Load an analytical, MLP or hydra model from a path or an already parsed document."""
    if isinstance(doc_or_path, dict):
        doc = doc_or_path
    else:
        try:
            with open(doc_or_path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"{doc_or_path}: not JSON ({exc.msg})") from None
    if isinstance(doc, dict) and doc.get("kind") == "hydra":
        return hydra_from_doc(doc)
    return model_from_doc(doc)


def save_model(model, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_doc(), fh)
        fh.write("\n")


PREDICTION_COLUMNS = ("timestamp", "predicted_watts", "scale_factor", "chosen_model", "selector_invoked")


def predictions_to_csv(predictions: Sequence[PowerPrediction], trace: Optional[Trace] = None) -> str:
    with_truth = trace is not None and trace.has_power()
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PREDICTION_COLUMNS + (("measured_power_watts",) if with_truth else ()))
    for i, p in enumerate(predictions):
        row = [repr(p.timestamp), repr(p.predicted_watts), repr(p.scale_factor), p.chosen_model,
               str(p.selector_invoked).lower()]
        if with_truth:
            row.append(repr(trace.samples[i].measured_power_watts))
        w.writerow(row)
    return buf.getvalue()


def predictions_from_csv(text: str) -> list:
    reader = csv.DictReader(io.StringIO(text, newline=""))
    missing = [c for c in PREDICTION_COLUMNS if c not in (reader.fieldnames or ())]
    if missing:
        raise ModelFormatError(f"prediction file lacks columns {missing}")
    out = []
    for row in reader:
        try:
            out.append(PowerPrediction(
                float(row["timestamp"]),
                float(row["predicted_watts"]),
                float(row["scale_factor"]),
                row["chosen_model"],
                row["selector_invoked"].strip().lower() == "true",
            ))
        except (TypeError, ValueError) as exc:
            raise ModelFormatError(f"prediction file line {reader.line_num}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SelectorTraining:
    model: HydraModel
    train_examples: tuple
    heldout_examples: tuple
    heldout_accuracy: float  # NaN when nothing is held out


def train_hydra(
    trace: Trace,
    candidates: Sequence[tuple],
    profile: ServerProfile,
    norm_stats: Optional[NormalizationStats] = None,
    window: int = 30,
    epsilon_rel: float = 0.05,
    forest_config=None,
    selection_interval: int = 1,
    holdout_fraction: float = 0.0,
) -> SelectorTraining:
    """Label windows of ``trace``, fit the selector forest and assemble a HydraModel.

    The last ``holdout_fraction`` of windows is excluded from forest training
    and used to report selector accuracy.  Without ``norm_stats`` the first
    MLP candidate's statistics are reused, else they are fitted on ``trace``.
    """
    from .selector import ForestConfig, label_windows, train_forest
    from .stats import fit_normalization

    if norm_stats is None:
        norm_stats = next(
            (m.norm_stats for _, m in candidates if isinstance(m, MlpModel) and m.norm_stats is not None),
            None,
        ) or fit_normalization([trace])
    examples = label_windows(trace, candidates, profile, norm_stats, window, epsilon_rel)
    n_hold = int(round(holdout_fraction * len(examples)))
    n_hold = min(n_hold, len(examples) - 1)
    train, held = examples[: len(examples) - n_hold], examples[len(examples) - n_hold:]
    ordered = sorted((spec for spec, _ in candidates), key=lambda s: s.overhead_rank)
    forest = train_forest(train, forest_config or ForestConfig(), [s.candidate_id for s in ordered])
    if held:
        X = np.array([ex.features.values for ex in held])
        picks = forest.predict_index_batch(X)
        acc = float(np.mean([forest.candidate_ids[i] == ex.label for i, ex in zip(picks, held)]))
    else:
        acc = float("nan")
    model = HydraModel(tuple(candidates), forest, norm_stats, profile, selection_interval)
    return SelectorTraining(model, tuple(train), tuple(held), acc)
