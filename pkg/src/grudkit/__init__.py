"""Recurrent classifiers (ERNN, GRU, GRU-D) for time series with missing values."""

__version__ = "0.1.0"

from .cells import CellKind, CellParams, NumericError, forward, init_params, load_checkpoint, save_checkpoint
from .dataset import (
    DatasetError,
    EpisodeSet,
    MaskedSeries,
    SplitSpec,
    class_weights,
    compute_deltas,
    load_episodes,
    save_episodes,
    split,
    standardize,
)
from .evaluation import aggregate_restarts, auc, f1_score, pca_last_states
from .imputation import ImputationKind, ImputationMethod, impute_locf, impute_mean, impute_zero
from .synthgen import SynthConfig, describe, generate
from .training import ConfigError, LossSpec, TrainConfig, finite_difference_check, gradients, loss, train
