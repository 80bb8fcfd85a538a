"""Masked multivariate time series: loading, splitting, scaling, class weights.

Missing entries are held as NaN in memory and as ``null`` on disk. The mask
is always derived from the values, never stored separately.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "DatasetError",
    "MaskedSeries",
    "EpisodeSet",
    "SplitSpec",
    "compute_deltas",
    "observed_means",
    "load_episodes",
    "save_episodes",
    "split",
    "class_weights",
    "standardize",
]


class DatasetError(ValueError):
    """Raised for malformed or inconsistent episode data."""


def compute_deltas(mask: np.ndarray, timestamps: np.ndarray) -> np.ndarray:
    """Time elapsed since each variable was last observed.

    ``mask`` has shape ``(..., T, V)`` and ``timestamps`` ``(..., T)``.
    The first row is zero; afterwards the gap ``s_t - s_{t-1}`` is added to
    the previous delta when the variable was missing at ``t-1`` and replaces
    it when the variable was observed.
    """
    mask = np.asarray(mask, dtype=bool)
    timestamps = np.asarray(timestamps, dtype=np.float64)
    deltas = np.zeros(mask.shape, dtype=np.float64)
    gaps = np.diff(timestamps, axis=-1)
    for t in range(1, mask.shape[-2]):
        gap = gaps[..., t - 1, None]
        deltas[..., t, :] = np.where(mask[..., t - 1, :], gap, gap + deltas[..., t - 1, :])
    return deltas


@dataclass(frozen=True)
class MaskedSeries:
    """One episode: values (T x V, NaN where missing) and timestamps (T)."""

    values: np.ndarray
    timestamps: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return (~np.isnan(self.values)).astype(np.float64)

    @property
    def deltas(self) -> np.ndarray:
        return compute_deltas(self.mask, self.timestamps)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def observed_means(values: np.ndarray) -> np.ndarray:
    """Per-variable mean over observed entries of a ``(N, T, V)`` array."""
    flat = values.reshape(-1, values.shape[-1])
    counts = np.sum(~np.isnan(flat), axis=0)
    if np.any(counts == 0):
        empty = np.flatnonzero(counts == 0).tolist()
        raise DatasetError(f"variables {empty} have no observed entries")
    return np.nansum(flat, axis=0) / counts


def _observed_stats(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    means = observed_means(values)
    flat = values.reshape(-1, values.shape[-1])
    stds = np.sqrt(np.nanmean((flat - means) ** 2, axis=0))
    return means, stds


@dataclass(frozen=True)
class EpisodeSet:
    """A labeled collection of equal-shape masked series.

    ``values`` is ``(N, T, V)`` with NaN for missing entries; ``timestamps``
    is ``(N, T)``. ``empirical_means`` and ``standardization_stats`` may be
    inherited from another set (the training split) rather than computed
    from this one.
    """

    values: np.ndarray
    timestamps: np.ndarray
    labels: np.ndarray
    variable_names: tuple[str, ...]
    ids: tuple[str, ...]
    empirical_means: np.ndarray
    standardization_stats: tuple[np.ndarray, np.ndarray] = field(repr=False, default=None)

    @classmethod
    def from_arrays(
        cls,
        values: np.ndarray,
        timestamps: np.ndarray,
        labels: Sequence[int],
        variable_names: Sequence[str] | None = None,
        ids: Sequence[str] | None = None,
    ) -> "EpisodeSet":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 3:
            raise DatasetError(f"values must be (N, T, V), got shape {values.shape}")
        n, t_len, n_vars = values.shape
        timestamps = np.broadcast_to(np.asarray(timestamps, dtype=np.float64), (n, t_len)).copy()
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise DatasetError(f"expected {n} labels, got {labels.shape}")
        if not np.isin(labels, (0, 1)).all():
            raise DatasetError("labels must be 0 or 1")
        if np.isinf(values).any():
            raise DatasetError("observed values must be finite")
        if t_len > 1 and not (np.diff(timestamps, axis=1) > 0).all():
            raise DatasetError("timestamps must be strictly increasing")
        if variable_names is None:
            variable_names = [f"v{i}" for i in range(n_vars)]
        if len(variable_names) != n_vars:
            raise DatasetError(f"{len(variable_names)} variable names for {n_vars} variables")
        if ids is None:
            ids = [str(i) for i in range(n)]
        stats = _observed_stats(values)
        return cls(values, timestamps, labels, tuple(variable_names), tuple(ids), stats[0], stats)

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def t_len(self) -> int:
        return self.values.shape[1]

    @property
    def n_vars(self) -> int:
        return self.values.shape[2]

    @property
    def mask(self) -> np.ndarray:
        return (~np.isnan(self.values)).astype(np.float64)

    @property
    def deltas(self) -> np.ndarray:
        return compute_deltas(self.mask, self.timestamps)

    @property
    def series(self) -> list[MaskedSeries]:
        return [MaskedSeries(v, s) for v, s in zip(self.values, self.timestamps)]

    def subset(self, index: Iterable[int]) -> "EpisodeSet":
        index = np.asarray(list(index), dtype=np.int64)
        return replace(
            self,
            values=self.values[index],
            timestamps=self.timestamps[index],
            labels=self.labels[index],
            ids=tuple(self.ids[i] for i in index),
        )

    def with_values(self, values: np.ndarray) -> "EpisodeSet":
        return replace(self, values=values)


@dataclass(frozen=True)
class SplitSpec:
    """Validation / train / test split.

    With ``mode="remainder"`` the train fraction applies to what is left
    after validation is removed; with ``mode="total"`` it applies to the
    whole set.
    """

    validation_fraction: float = 0.2
    train_fraction_of_remainder: float = 0.6
    seed: int = 0
    mode: str = "remainder"

    def __post_init__(self):
        for name in ("validation_fraction", "train_fraction_of_remainder"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")
        if self.mode not in ("remainder", "total"):
            raise ValueError(f"unknown split mode {self.mode!r}")

    def sizes(self, n: int) -> tuple[int, int, int]:
        n_val = math.floor(self.validation_fraction * n + 1e-9)
        base = n - n_val if self.mode == "remainder" else n
        n_train = math.floor(self.train_fraction_of_remainder * base + 1e-9)
        return n_train, n_val, n - n_val - n_train


def split(episodes: EpisodeSet, spec: SplitSpec) -> tuple[EpisodeSet, EpisodeSet, EpisodeSet]:
    """Shuffle (seeded) and partition into (train, validation, test).

    Empirical means and standardization stats of all three parts are taken
    from the training part.
    """
    n = len(episodes)
    n_train, n_val, n_test = spec.sizes(n)
    if min(n_train, n_val, n_test) <= 0:
        raise DatasetError(f"split of {n} episodes gives sizes {(n_train, n_val, n_test)}")
    order = np.random.default_rng(spec.seed).permutation(n)
    val_idx = order[:n_val]
    train_idx = order[n_val : n_val + n_train]
    test_idx = order[n_val + n_train :]
    train = episodes.subset(train_idx)
    stats = _observed_stats(train.values)
    parts = [
        replace(part, empirical_means=stats[0], standardization_stats=stats)
        for part in (train, episodes.subset(val_idx), episodes.subset(test_idx))
    ]
    return parts[0], parts[1], parts[2]


def class_weights(labels: Sequence[int]) -> tuple[float, float]:
    """Per-class loss weights ``alpha_i = 1 - n_i / N`` for classes 0 and 1."""
    labels = np.asarray(labels)
    n = labels.size
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0 or n_pos + n_neg != n:
        raise DatasetError("class weights need both classes present (labels in {0, 1})")
    return 1.0 - n_neg / n, 1.0 - n_pos / n


def standardize(episodes: EpisodeSet, stats: tuple[np.ndarray, np.ndarray]) -> EpisodeSet:
    """Z-score observed entries per variable; zero-variance variables pass through."""
    means, stds = (np.asarray(a, dtype=np.float64) for a in stats)
    degenerate = ~(stds > 0)
    center = np.where(degenerate, 0.0, means)
    scale = np.where(degenerate, 1.0, stds)
    values = (episodes.values - center) / scale
    return replace(
        episodes,
        values=values,
        empirical_means=(episodes.empirical_means - center) / scale,
        standardization_stats=(means, stds),
    )


# --------------------------------------------------------------------------
# JSON-lines I/O
# --------------------------------------------------------------------------


def _parse_line(line: str, lineno: int, path) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise DatasetError(f"{path}:{lineno}: expected a JSON object")
    return obj


def load_episodes(path: str | Path) -> EpisodeSet:
    """Read the JSON-lines episode format (header line, then one episode per line)."""
    path = Path(path)
    lines = [(i, ln) for i, ln in enumerate(path.read_text().splitlines(), start=1) if ln.strip()]
    if not lines:
        raise DatasetError(f"{path}: empty file")
    header = _parse_line(lines[0][1], lines[0][0], path)
    try:
        variables = [str(v) for v in header["variables"]]
        t_len = int(header["t_len"])
    except (KeyError, TypeError, ValueError):
        raise DatasetError(f"{path}:{lines[0][0]}: header needs 'variables' and 't_len'") from None

    values, stamps, labels, ids = [], [], [], []
    for lineno, line in lines[1:]:
        rec = _parse_line(line, lineno, path)
        where = f"{path}:{lineno}"
        try:
            label = rec["label"]
            ts = rec["timestamps"]
            rows = rec["values"]
        except KeyError as exc:
            raise DatasetError(f"{where}: missing field {exc.args[0]!r}") from None
        if label not in (0, 1) or isinstance(label, bool):
            raise DatasetError(f"{where}: label must be 0 or 1")
        if len(ts) != t_len or len(rows) != t_len:
            raise DatasetError(f"{where}: expected {t_len} time steps")
        if any(not isinstance(row, list) or len(row) != len(variables) for row in rows):
            raise DatasetError(f"{where}: expected {len(variables)} values per time step")
        try:
            arr = np.array([[np.nan if x is None else float(x) for x in row] for row in rows])
            ts_arr = np.array([float(s) for s in ts])
        except (TypeError, ValueError):
            raise DatasetError(f"{where}: non-numeric entry") from None
        if not np.isfinite(ts_arr).all() or (t_len > 1 and not (np.diff(ts_arr) > 0).all()):
            raise DatasetError(f"{where}: timestamps must be finite and strictly increasing")
        if np.isinf(arr).any():
            raise DatasetError(f"{where}: non-finite value")
        values.append(arr)
        stamps.append(ts_arr)
        labels.append(int(label))
        ids.append(str(rec.get("id", len(ids))))
    if not values:
        raise DatasetError(f"{path}: no episodes")
    return EpisodeSet.from_arrays(np.stack(values), np.stack(stamps), labels, variables, ids)


def _num(x: float):
    if math.isnan(x):
        return None
    return float(x)


def save_episodes(episodes: EpisodeSet, path: str | Path) -> None:
    """Write the JSON-lines format; NaN entries become ``null``."""
    out = [json.dumps({"variables": list(episodes.variable_names), "t_len": episodes.t_len})]
    for i in range(len(episodes)):
        out.append(
            json.dumps(
                {
                    "id": episodes.ids[i],
                    "label": int(episodes.labels[i]),
                    "timestamps": [float(s) for s in episodes.timestamps[i]],
                    "values": [[_num(x) for x in row] for row in episodes.values[i].tolist()],
                }
            )
        )
    Path(path).write_text("\n".join(out) + "\n")
