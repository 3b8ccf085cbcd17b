"""Boost black-box text-generation metrics with feature-importance explanations.

The pipeline: score an instance with any metric, explain the score with a
token-attribution explainer (erasure, lime, or shap), summarize the
attribution with a power mean, and blend the summary back into the original
score. Calibration picks the blend parameters on held-out data; evaluation
measures correlation with human judgements and tests significance.
"""

from .boosting import (
    BoostedMetric,
    BoostParams,
    ScoredInstance,
    aggregate,
    boost,
    boost_dataset,
    power_mean,
    power_mean_grid,
    regularize,
)
from .bridge import BridgeError, BridgeMetric, external_metric
from .calibration import (
    CalibrationResult,
    GridSpec,
    grid_search,
    merge_calibrations,
    read_profile,
    write_profile,
)
from .corpus import (
    Dataset,
    DatasetError,
    EvalInstance,
    Segment,
    SplitPlan,
    load_dataset,
    make_splits,
    save_dataset,
    tokenize,
)
from .evaluation import (
    CorrelationSpec,
    EvalReport,
    ReportRow,
    UndefinedCorrelationError,
    bonferroni,
    correlation,
    evaluate,
    kendall,
    pearson,
    permute_both_test,
    spearman,
    stability_check,
    system_scores,
)
from .explainers import (
    Attribution,
    ExplainerConfig,
    ExplainerError,
    erasure,
    explain,
    lime,
    shap,
)
from .metrics import (
    AdditiveMetric,
    CachingMetric,
    CallableMetric,
    CountingMetric,
    MetricError,
    MetricHandle,
    MetricRequest,
    TokenF1Metric,
    TokenOverlapMetric,
    builtin_additive,
    builtin_metric,
    builtin_token_f1,
    score_batch,
    score_instances,
)

__version__ = "0.1.0"

__all__ = [
    "AdditiveMetric",
    "Attribution",
    "BoostedMetric",
    "BoostParams",
    "BridgeError",
    "BridgeMetric",
    "CachingMetric",
    "CalibrationResult",
    "CallableMetric",
    "CorrelationSpec",
    "CountingMetric",
    "Dataset",
    "DatasetError",
    "EvalInstance",
    "EvalReport",
    "ExplainerConfig",
    "ExplainerError",
    "GridSpec",
    "MetricError",
    "MetricHandle",
    "MetricRequest",
    "ReportRow",
    "ScoredInstance",
    "Segment",
    "SplitPlan",
    "TokenF1Metric",
    "TokenOverlapMetric",
    "UndefinedCorrelationError",
    "aggregate",
    "bonferroni",
    "boost",
    "boost_dataset",
    "builtin_additive",
    "builtin_metric",
    "builtin_token_f1",
    "correlation",
    "erasure",
    "evaluate",
    "explain",
    "external_metric",
    "grid_search",
    "kendall",
    "lime",
    "load_dataset",
    "make_splits",
    "merge_calibrations",
    "pearson",
    "permute_both_test",
    "power_mean",
    "power_mean_grid",
    "read_profile",
    "regularize",
    "save_dataset",
    "score_batch",
    "score_instances",
    "shap",
    "spearman",
    "stability_check",
    "system_scores",
    "tokenize",
    "write_profile",
]
