"""Seeded synthetic cohorts with label-informative missingness.

Every series is an AR(1) process per variable around a variable-specific
level and scale. Positive episodes get a mean shift on the signal variables
from ``onset_day`` onward and an extra drop-out probability on the
informative variables, so part of the class signal lives in the mask.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dataset import EpisodeSet

DEFAULT_VARIABLES = (
    "alat",
    "albumin",
    "alp",
    "creatinine",
    "crp",
    "hemoglobin",
    "leukocytes",
    "potassium",
    "sodium",
    "thrombocytes",
)


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings.

    ``signal_shift`` is measured in units of each variable's scale.
    ``signal_vars`` and ``informative_vars`` index the variables that carry
    the value shift and the extra missingness for positives.
    """

    n_series: int = 800
    t_len: int = 20
    n_vars: int = 10
    class_balance: float = 232 / 883
    base_missing_rate: float = 0.5
    informative_missing_boost: float = 0.3
    signal_shift: float = 1.0
    onset_day: int = 5
    noise_std: float = 1.0
    ar_coef: float = 0.7
    signal_vars: tuple[int, ...] = (0, 1, 2, 3)
    informative_vars: tuple[int, ...] = (0, 1, 2, 3)
    heterogeneous_scales: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "signal_vars", tuple(int(v) for v in self.signal_vars))
        object.__setattr__(self, "informative_vars", tuple(int(v) for v in self.informative_vars))
        if self.n_series < 1 or self.t_len < 1 or self.n_vars < 1:
            raise ValueError("n_series, t_len and n_vars must be positive")
        if not 0.0 <= self.onset_day < self.t_len:
            raise ValueError("onset_day must lie in [0, t_len)")
        if not 0.0 <= self.base_missing_rate < 1.0:
            raise ValueError("base_missing_rate must lie in [0, 1)")
        if self.informative_missing_boost < 0:
            raise ValueError("informative_missing_boost must be nonnegative")
        if self.base_missing_rate + self.informative_missing_boost >= 1.0:
            raise ValueError("base_missing_rate + informative_missing_boost must be < 1")
        if not 0.0 <= self.class_balance <= 1.0:
            raise ValueError("class_balance must lie in [0, 1]")
        if self.noise_std < 0 or not -1.0 < self.ar_coef < 1.0:
            raise ValueError("noise_std must be >= 0 and |ar_coef| < 1")
        for v in self.signal_vars + self.informative_vars:
            if not 0 <= v < self.n_vars:
                raise ValueError(f"variable index {v} out of range")

    def effective_missing_rate(self) -> float:
        frac = len(self.informative_vars) / self.n_vars
        return self.base_missing_rate + self.informative_missing_boost * self.class_balance * frac

    def to_dict(self) -> dict:
        d = asdict(self)
        d["signal_vars"] = list(self.signal_vars)
        d["informative_vars"] = list(self.informative_vars)
        return d


def variable_names(n_vars: int) -> list[str]:
    if n_vars <= len(DEFAULT_VARIABLES):
        return list(DEFAULT_VARIABLES[:n_vars])
    return [f"v{i}" for i in range(n_vars)]


def generate(config: SynthConfig) -> EpisodeSet:
    rng = np.random.default_rng(config.seed)
    N, T, V = config.n_series, config.t_len, config.n_vars
    labels = (rng.random(N) < config.class_balance).astype(np.int64)

    if config.heterogeneous_scales:
        scales = 10.0 ** rng.uniform(-1.0, 2.5, size=V)
        levels = scales * rng.uniform(2.0, 6.0, size=V)
    else:
        scales, levels = np.ones(V), np.zeros(V)

    phi = config.ar_coef
    eps = rng.standard_normal((N, T, V))
    z = np.empty((N, T, V))
    z[:, 0] = eps[:, 0]
    for t in range(1, T):
        z[:, t] = phi * z[:, t - 1] + np.sqrt(1.0 - phi * phi) * eps[:, t]
    z *= config.noise_std

    shift = np.zeros((N, T, V))
    onset = int(np.ceil(config.onset_day))
    if config.signal_vars:
        shift[:, onset:, list(config.signal_vars)] = config.signal_shift
    z += shift * labels[:, None, None]
    values = levels + scales * z

    p_missing = np.full((N, T, V), config.base_missing_rate)
    if config.informative_vars:
        p_missing[:, :, list(config.informative_vars)] += (
            config.informative_missing_boost * labels[:, None, None]
        )
    missing = rng.random((N, T, V)) < p_missing
    for v in np.flatnonzero(missing.all(axis=(0, 1))):
        missing[0, 0, v] = False
    values[missing] = np.nan

    timestamps = np.broadcast_to(np.arange(T, dtype=np.float64), (N, T))
    ids = [f"syn{config.seed}-{i:05d}" for i in range(N)]
    return EpisodeSet.from_arrays(values, timestamps, labels, variable_names(V), ids)


def describe(episodes: EpisodeSet, onset_day: int | None = None) -> dict:
    """Class counts and per-variable missing rates and observed means by class.

    With ``onset_day`` the means are restricted to time steps from onset on.
    """
    labels = np.asarray(episodes.labels)
    values = episodes.values
    if onset_day is not None:
        values = values[:, int(onset_day) :]
    out = {"n_series": len(episodes), "class_counts": {"0": int(np.sum(labels == 0)), "1": int(np.sum(labels == 1))}}
    per_var = {}
    for v, name in enumerate(episodes.variable_names):
        entry = {}
        for cls in (0, 1):
            sel = values[labels == cls, :, v]
            if sel.size == 0:
                entry[str(cls)] = {"missing_rate": float("nan"), "observed_mean": float("nan")}
                continue
            obs = sel[~np.isnan(sel)]
            entry[str(cls)] = {
                "missing_rate": float(np.mean(np.isnan(sel))),
                "observed_mean": float(obs.mean()) if obs.size else float("nan"),
            }
        per_var[name] = entry
    out["variables"] = per_var
    out["observed_fraction"] = float(np.mean(~np.isnan(episodes.values)))
    return out
