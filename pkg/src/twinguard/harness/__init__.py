"""Episode runner, seeded campaign, metrics, ingestion and the command line."""

from .campaign import (Artifacts, CampaignConfig, evaluate, make_pipeline, mmd_ablation, report_json, train_all,
                       train_detector, train_twin)
from .episode import EpisodeConfig, Pipeline, run_episode
from .metrics import compute_detection_metrics, compute_resilience_metrics, confusion_matrix, per_class_scores
from .preprocess import NormStats, Schema, preprocess_ingest
from .records import DisruptionCostParams, EpisodeResult, MetricsReport
from .stats import bootstrap_ci, clopper_pearson_upper

__all__ = [
    "Artifacts", "CampaignConfig", "evaluate", "make_pipeline", "mmd_ablation", "report_json", "train_all",
    "train_detector", "train_twin", "EpisodeConfig", "Pipeline", "run_episode", "compute_detection_metrics",
    "compute_resilience_metrics", "confusion_matrix", "per_class_scores", "NormStats", "Schema",
    "preprocess_ingest", "DisruptionCostParams", "EpisodeResult", "MetricsReport", "bootstrap_ci",
    "clopper_pearson_upper",
]
