"""Server power prediction with a selector that switches between a cheap
utilization-based formula and a small neural network."""

from .errors import (
    ConfigurationError,
    CounterReadError,
    HydraError,
    MissingColumnError,
    ModelFormatError,
    SampleValidationError,
    TraceFormatError,
    TrainingDataError,
    UndefinedCorrelationError,
    UnsupportedPlatformError,
)
from .evaluation import (
    EvalReport,
    Intensity,
    LatencyReport,
    evaluate,
    intensity_bin,
    latency_bench,
    rapl_ratio_report,
)
from .hydra import (
    HydraModel,
    PowerPrediction,
    SelectionState,
    hydra_predict,
    load_any_model,
    run_over_trace,
    run_single_model,
    save_model,
    scale_to_watts,
    train_hydra,
    watts_to_scale,
)
from .models import (
    AnalyticalModel,
    LabeledExample,
    MlpModel,
    TrainConfig,
    TrainResult,
    analytical_predict,
    fit_alpha,
    gradient_check,
    mlp_forward,
    mlp_init,
    moving_average_baseline,
    train_mlp,
)
from .selector import (
    CandidateSpec,
    DecisionTree,
    ForestConfig,
    SelectorExample,
    SelectorForest,
    forest_predict,
    gini,
    label_windows,
    train_forest,
)
from .stats import (
    CorrelationReport,
    FeatureVector,
    NormalizationStats,
    fit_normalization,
    normalize,
    pearson,
    rmse,
    select_features,
)
from .trace import (
    DEFAULT_PROFILE,
    FEATURE_NAMES,
    Regime,
    ServerProfile,
    StatSample,
    SyntheticConfig,
    Trace,
    TraceFormat,
    generate_synthetic,
    live_sample,
    parse_trace,
    write_trace,
)

__version__ = "0.1.0"
