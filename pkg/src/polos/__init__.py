"""Trainable image-captioning evaluation metric.

Scores a candidate caption against references and the image by fusing
precomputed embeddings through a small regression head trained on human
judgments, and ships the training loop plus the standard benchmark
protocols (rank correlation, pairwise preference, hallucination detection,
judgment QC).
"""

from polos.bundle import (
    BundleError,
    BundleHeader,
    DatasetSplit,
    EmbeddingSample,
    ValidationReport,
    read_bundle,
    synth_samples,
    validate_bundle,
    write_bundle,
)
from polos.evaluation import (
    DegenerateStatisticError,
    EvalReport,
    FoilPair,
    PascalPair,
    ScoredPair,
    correlation_report,
    foil_accuracy,
    kendall_tau_b,
    kendall_tau_c,
    pascal_accuracy,
    tau_b,
    tau_c,
)
from polos.head import (
    HeadConfig,
    HeadError,
    HeadParams,
    ScoreOutput,
    build_h_inter,
    fuse,
    init_params,
    load_checkpoint,
    save_checkpoint,
    score,
    score_gradient,
    score_samples,
)
from polos.judgments import (
    AggregatedScore,
    EvaluatorProfile,
    JudgmentRecord,
    QCThresholds,
    aggregate_scores,
    filter_evaluators,
    make_splits,
    normalize_rating,
    score_distribution,
)
from polos.kernels import HAVE_NATIVE
from polos.training import AdamState, TrainConfig, TrainLog, adam_step, fit, train_epoch

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AggregatedScore",
    "BundleError",
    "BundleHeader",
    "DatasetSplit",
    "DegenerateStatisticError",
    "EmbeddingSample",
    "EvalReport",
    "EvaluatorProfile",
    "FoilPair",
    "HAVE_NATIVE",
    "HeadConfig",
    "HeadError",
    "HeadParams",
    "JudgmentRecord",
    "PascalPair",
    "QCThresholds",
    "ScoreOutput",
    "ScoredPair",
    "TrainConfig",
    "TrainLog",
    "ValidationReport",
    "adam_step",
    "aggregate_scores",
    "build_h_inter",
    "correlation_report",
    "filter_evaluators",
    "fit",
    "foil_accuracy",
    "fuse",
    "init_params",
    "kendall_tau_b",
    "kendall_tau_c",
    "load_checkpoint",
    "make_splits",
    "normalize_rating",
    "pascal_accuracy",
    "read_bundle",
    "save_checkpoint",
    "score",
    "score_distribution",
    "score_gradient",
    "score_samples",
    "synth_samples",
    "tau_b",
    "tau_c",
    "train_epoch",
    "validate_bundle",
    "write_bundle",
]
