"""Classification metrics, ROC curves, PCA of final states, restart summaries."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata


def confusion(preds, labels) -> tuple[int, int, int, int]:
    """(tp, fp, tn, fn) with class 1 as the positive class."""
    preds = np.asarray(preds).astype(bool)
    labels = np.asarray(labels).astype(bool)
    tp = int(np.sum(preds & labels))
    fp = int(np.sum(preds & ~labels))
    tn = int(np.sum(~preds & ~labels))
    fn = int(np.sum(~preds & labels))
    return tp, fp, tn, fn


def f1_score(preds, labels) -> float:
    tp, fp, _, fn = confusion(preds, labels)
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def _check_binary(labels):
    labels = np.asarray(labels).astype(int)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise ValueError("AUC needs both classes present")
    return labels, n_pos, labels.size - n_pos


def auc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counted as 1/2."""
    labels, n_pos, n_neg = _check_binary(labels)
    ranks = rankdata(np.asarray(scores, dtype=np.float64))
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """ROC points from a descending threshold sweep; tied scores form one step."""
    labels, n_pos, n_neg = _check_binary(labels)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tps = np.cumsum(y)[last_of_group]
    fps = np.cumsum(1 - y)[last_of_group]
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    return fpr, tpr


def trapezoid_auc(fpr, tpr) -> float:
    fpr, tpr = np.asarray(fpr), np.asarray(tpr)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


@dataclass
class StateProjection:
    coordinates: np.ndarray
    explained_variance: np.ndarray
    components: np.ndarray
    labels: np.ndarray
    mean: np.ndarray


def pca_last_states(states, labels=None, n_components: int = 2) -> StateProjection:
    """Project final hidden states onto their top principal components.

    Each component is flipped so that its first nonzero loading is positive.
    """
    X = np.asarray(states, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < n_components:
        raise ValueError(f"need at least {n_components} state dimensions, got shape {X.shape}")
    if X.shape[0] < 3:
        raise ValueError("need at least 3 states")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    top = np.argsort(evals)[::-1][:n_components]
    comps = evecs[:, top].T.copy()
    for comp in comps:
        nz = np.flatnonzero(np.abs(comp) > 1e-12)
        if nz.size and comp[nz[0]] < 0:
            comp *= -1.0
    variance = np.clip(evals[top], 0.0, None)
    labels = np.zeros(X.shape[0], dtype=int) if labels is None else np.asarray(labels, dtype=int)
    return StateProjection(Xc @ comps.T, variance, comps, labels, mean)


@dataclass
class EvalReport:
    f1: float
    auc: float
    confusion: dict
    n: int
    threshold: float = 0.5
    roc_points: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"


def evaluate_scores(scores, labels, threshold: float = 0.5, **meta) -> EvalReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    preds = (scores >= threshold).astype(int)
    tp, fp, tn, fn = confusion(preds, labels)
    fpr, tpr = roc_curve(scores, labels)
    return EvalReport(
        f1=f1_score(preds, labels),
        auc=auc(scores, labels),
        confusion={"tp": tp, "fp": fp, "tn": tn, "fn": fn},
        n=int(labels.size),
        threshold=threshold,
        roc_points=[[float(a), float(b)] for a, b in zip(fpr, tpr)],
        meta=meta,
    )


def aggregate_restarts(reports, metrics=("f1", "auc")) -> dict[str, tuple[float, float]]:
    """Mean and standard error (sample std / sqrt(k)) per metric over restarts."""
    if len(reports) < 2:
        raise ValueError("need at least two restarts")
    out = {}
    for name in metrics:
        vals = np.array([r[name] if isinstance(r, dict) else getattr(r, name) for r in reports], dtype=float)
        out[name] = (float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(vals.size)))
    return out


def format_summary(summary: dict[str, tuple[float, float]], digits: int = 2) -> dict[str, str]:
    return {k: f"{m:.{digits}f} ± {se:.{digits}f}" for k, (m, se) in summary.items()}


def format_table(rows: dict[str, dict[str, tuple[float, float]]], columns, digits: int = 2) -> str:
    """Plain-text table, one model per row, cells as ``mean ± se``."""
    header = ["Model"] + [c for c in columns]
    lines = [header]
    for model, summary in rows.items():
        cells = format_summary({c: summary[c] for c in columns}, digits)
        lines.append([model] + [cells[c] for c in columns])
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in lines) + "\n"


def write_xy_csv(path, x, y, labels=None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y", "label"])
        for i, (a, b) in enumerate(zip(x, y)):
            writer.writerow([repr(float(a)), repr(float(b)), "" if labels is None else int(labels[i])])
