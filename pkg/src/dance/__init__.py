"""Doubly adaptive neighborhood conformal prediction on embedding vectors.

A learned-metric kernel ridge regression (RFM) adapts the embedding space to
the task; two neighborhood nonconformity scores in that space are calibrated
with a shared error budget and their label sets intersected.
"""

from dance.conformal import (
    CalibrationArtifact,
    ScoreConfig,
    calibrate,
    conformal_quantile,
    dance_set,
    score_clr,
    score_knn,
    select_lambda,
    set_clr,
    set_knn,
)
from dance.data import EmbeddedDataset, SplitSpec, split_dataset, synth_gaussian_mixture
from dance.experiment import ExperimentConfig, SyntheticSpec, monte_carlo_coverage, run_experiment
from dance.kernels import KernelParams, kernel_eval, kernel_matrix
from dance.neighbors import build_index, knn_query
from dance.rfm import RfmConfig, RfmModel, rfm_train, tune_hyperparameters

__version__ = "0.1.0"

__all__ = [
    "CalibrationArtifact",
    "EmbeddedDataset",
    "ExperimentConfig",
    "KernelParams",
    "RfmConfig",
    "RfmModel",
    "ScoreConfig",
    "SplitSpec",
    "SyntheticSpec",
    "build_index",
    "calibrate",
    "conformal_quantile",
    "dance_set",
    "kernel_eval",
    "kernel_matrix",
    "knn_query",
    "monte_carlo_coverage",
    "rfm_train",
    "run_experiment",
    "score_clr",
    "score_knn",
    "select_lambda",
    "set_clr",
    "set_knn",
    "split_dataset",
    "synth_gaussian_mixture",
    "tune_hyperparameters",
]
