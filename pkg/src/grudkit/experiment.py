"""Split -> standardize -> impute -> train -> evaluate, for one or many restarts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cells import CellKind, CellParams
from .dataset import EpisodeSet, SplitSpec, split, standardize
from .evaluation import EvalReport, aggregate_restarts, evaluate_scores, pca_last_states
from .imputation import ImputationMethod
from .training import Batch, ConfigError, TrainConfig, TrainResult, predict, prepare, train


@dataclass
class PreparedSplits:
    train: EpisodeSet
    validation: EpisodeSet
    test: EpisodeSet
    imputation: ImputationMethod | None

    def get(self, name: str) -> EpisodeSet:
        return {"train": self.train, "val": self.validation, "validation": self.validation, "test": self.test}[name]


def check_pairing(kind, impute: str | None) -> None:
    kind = CellKind(kind)
    if kind is CellKind.GRUD and impute:
        raise ConfigError("GRU-D handles missing values itself; drop --impute")
    if kind is not CellKind.GRUD and not impute:
        raise ConfigError(f"{kind.value} needs --impute {{zero,locf,mean}}")


def prepare_splits(episodes: EpisodeSet, spec: SplitSpec, impute: str | None, scale: bool = True) -> PreparedSplits:
    parts = split(episodes, spec)
    if scale:
        stats = parts[0].standardization_stats
        parts = tuple(standardize(p, stats) for p in parts)
    method = ImputationMethod.from_training(impute, parts[0]) if impute else None
    return PreparedSplits(*parts, method)


@dataclass
class RestartResult:
    cell: str
    impute: str | None
    restart: int
    seed: int
    split_seed: int
    fit: TrainResult
    splits: PreparedSplits
    val: EvalReport
    test: EvalReport

    @property
    def label(self) -> str:
        return model_label(self.cell, self.impute)


def model_label(cell, impute) -> str:
    name = CellKind(cell).name
    return name if not impute else f"{name}-{impute[0]}"


def evaluate_model(params: CellParams, episodes: EpisodeSet, imputation, threshold=0.5, **meta):
    """Report plus final hidden states for ``episodes`` (dropout off)."""
    batch: Batch = prepare(params.kind, episodes, imputation)
    scores, states = predict(params, batch)
    return evaluate_scores(scores, episodes.labels, threshold, **meta), states


def run_restart(
    episodes: EpisodeSet,
    cell,
    impute: str | None,
    config: TrainConfig,
    split_spec: SplitSpec,
    restart: int = 0,
    scale: bool = True,
) -> RestartResult:
    """One restart: split and init seeds are offset by the restart index."""
    check_pairing(cell, impute)
    split_seed = split_spec.seed + restart
    splits = prepare_splits(
        episodes,
        SplitSpec(split_spec.validation_fraction, split_spec.train_fraction_of_remainder, split_spec.seed + restart, split_spec.mode),
        impute,
        scale,
    )
    seed = config.seed + restart
    cfg = TrainConfig(**{**config.__dict__, "seed": seed})
    fit = train(cfg, cell, splits.train, splits.validation, splits.imputation)
    val, _ = evaluate_model(fit.params, splits.validation, splits.imputation, cfg.threshold)
    test, _ = evaluate_model(fit.params, splits.test, splits.imputation, cfg.threshold)
    return RestartResult(CellKind(cell).value, impute, restart, seed, split_seed, fit, splits, val, test)


def project_states(params: CellParams, episodes: EpisodeSet, imputation):
    _, states = evaluate_model(params, episodes, imputation)
    return pca_last_states(states, episodes.labels)


def summarize(results: list[RestartResult]) -> dict[str, tuple[float, float]]:
    rows = [
        {"val_auc": r.val.auc, "val_f1": r.val.f1, "test_auc": r.test.auc, "test_f1": r.test.f1} for r in results
    ]
    if len(rows) == 1:
        return {k: (float(v), float("nan")) for k, v in rows[0].items()}
    return aggregate_restarts(rows, ("val_auc", "val_f1", "test_auc", "test_f1"))


def mean_test_auc(results: list[RestartResult]) -> float:
    return float(np.mean([r.test.auc for r in results]))
