"""Baseline imputation: zero, last observation carried forward, mean.

All functions accept either a :class:`MaskedSeries` or a raw array of shape
``(..., T, V)`` with NaN marking missing entries, and return the same kind.
Observed entries are never modified.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .dataset import EpisodeSet, MaskedSeries


class ImputationKind(str, Enum):
    ZERO = "zero"
    LOCF = "locf"
    MEAN = "mean"


def _unwrap(series):
    if isinstance(series, MaskedSeries):
        return series.values, lambda v: MaskedSeries(v, series.timestamps)
    return np.asarray(series, dtype=np.float64), lambda v: v


def impute_zero(series):
    values, wrap = _unwrap(series)
    return wrap(np.where(np.isnan(values), 0.0, values))


def impute_mean(series, means):
    values, wrap = _unwrap(series)
    return wrap(np.where(np.isnan(values), np.asarray(means, dtype=np.float64), values))


def impute_locf(series, fallback):
    """Carry the last observed value forward; leading gaps take ``fallback[v]``."""
    values, wrap = _unwrap(series)
    observed = ~np.isnan(values)
    t_idx = np.arange(values.shape[-2])[:, None]
    last = np.maximum.accumulate(np.where(observed, t_idx, -1), axis=-2)
    carried = np.take_along_axis(values, np.maximum(last, 0), axis=-2)
    fallback = np.broadcast_to(np.asarray(fallback, dtype=np.float64), values.shape)
    filled = np.where(last >= 0, carried, fallback)
    return wrap(np.where(observed, values, filled))


@dataclass(frozen=True)
class ImputationMethod:
    """An imputation strategy plus the training-split means it falls back on."""

    kind: ImputationKind
    fallback_means: np.ndarray

    def __call__(self, series):
        if self.kind is ImputationKind.ZERO:
            return impute_zero(series)
        if self.kind is ImputationKind.LOCF:
            return impute_locf(series, self.fallback_means)
        return impute_mean(series, self.fallback_means)

    @classmethod
    def from_training(cls, kind: str | ImputationKind, train: EpisodeSet) -> "ImputationMethod":
        return cls(ImputationKind(kind), np.asarray(train.empirical_means, dtype=np.float64))


def impute_episodes(episodes: EpisodeSet, method: ImputationMethod) -> EpisodeSet:
    return episodes.with_values(method(episodes.values))
