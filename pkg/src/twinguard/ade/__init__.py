"""Residual-window discrimination engine: BiGRU encoder, softmax head, MMD validation."""

from .mmd import (MmdReference, median_bandwidth, mmd2, mmd2_unbiased_grad, permutation_null,
                  permutation_threshold, rbf, sq_dists)
from .model import (AdeConfig, AdeEngine, AdeModel, ClassProbabilities, ResidualStats, build_window,
                    classify, classify_validated, stealth_risk)
from .train import ade_batch_loss, balance_classes, evaluate_ce, latent_mmd, train_ade, windows_from_stream

__all__ = [
    "MmdReference", "median_bandwidth", "mmd2", "mmd2_unbiased_grad", "permutation_null",
    "permutation_threshold", "rbf", "sq_dists", "AdeConfig", "AdeEngine", "AdeModel",
    "ClassProbabilities", "ResidualStats", "build_window", "classify", "classify_validated",
    "stealth_risk", "ade_batch_loss", "balance_classes", "evaluate_ce", "latent_mmd", "train_ade",
    "windows_from_stream",
]
