"""Class-weighted loss, backpropagation through time, Adam, and the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cells import (
    CellKind,
    CellParams,
    ForwardCache,
    NumericError,
    dropout_mask,
    init_params,
    run_batch,
)
from .dataset import EpisodeSet, class_weights
from .evaluation import auc, f1_score
from .imputation import ImputationMethod, impute_episodes

log = logging.getLogger(__name__)

PROB_EPS = 1e-12


class ConfigError(ValueError):
    """Invalid combination of model and training options."""


@dataclass(frozen=True)
class LossSpec:
    """Per-class weights ``alpha = (alpha_0, alpha_1)`` and L2 strength.

    ``reg="sumsq"`` penalizes the sum of squared weights; ``reg="norm"``
    penalizes its square root (the Euclidean norm of all weights).
    """

    alpha: tuple[float, float] = (0.5, 0.5)
    lam: float = 0.0
    reg: str = "sumsq"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.reg not in ("sumsq", "norm"):
            raise ValueError(f"unknown regularizer {self.reg!r}")


@dataclass
class Batch:
    """Model-ready arrays: values ``(B, T, V)``, plus mask and deltas for GRU-D."""

    values: np.ndarray
    labels: np.ndarray
    mask: np.ndarray | None = None
    deltas: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)

    def take(self, index) -> "Batch":
        pick = lambda a: None if a is None else a[index]
        return Batch(self.values[index], self.labels[index], pick(self.mask), pick(self.deltas))

    @classmethod
    def from_episodes(cls, episodes: EpisodeSet, kind) -> "Batch":
        labels = np.asarray(episodes.labels, dtype=np.float64)
        if CellKind(kind) is CellKind.GRUD:
            return cls(episodes.values, labels, episodes.mask, episodes.deltas)
        return cls(episodes.values, labels)


def run(params: CellParams, batch: Batch, drop=None):
    return run_batch(params, batch.values, mask=batch.mask, deltas=batch.deltas, drop=drop)


def _penalty(params: CellParams, spec: LossSpec) -> float:
    sq = sum(float(np.sum(params[k] ** 2)) for k in params.regularized())
    return sq if spec.reg == "sumsq" else float(np.sqrt(sq))


def loss(p_hats, labels, spec: LossSpec, params: CellParams | None = None) -> float:
    """Weighted binary cross-entropy averaged over samples, plus the L2 term."""
    p = np.clip(np.asarray(p_hats, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(labels, dtype=np.float64)
    alpha = np.where(y > 0.5, spec.alpha[1], spec.alpha[0])
    bce = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    value = float(np.mean(alpha * bce))
    if params is not None and spec.lam > 0:
        value += spec.lam * _penalty(params, spec)
    return value


# --------------------------------------------------------------------------
# backpropagation through time
# --------------------------------------------------------------------------


def _gru_backward(p, g, gh, x, h_prev, gates, m=None):
    """Backprop one GRU step; accumulates into ``g`` and returns (d h_prev, d x)."""
    r, u, c = gates
    gu = gh * (c - h_prev)
    ga_c = gh * u * (1.0 - c * c)
    ga_u = gu * u * (1.0 - u)
    g_hr = ga_c @ p["W"]
    ga_r = g_hr * h_prev * r * (1.0 - r)

    g["W"] += ga_c.T @ (h_prev * r)
    g["R"] += ga_c.T @ x
    g["b"] += ga_c.sum(0)
    g["W_r"] += ga_r.T @ h_prev
    g["R_r"] += ga_r.T @ x
    g["b_r"] += ga_r.sum(0)
    g["W_u"] += ga_u.T @ h_prev
    g["R_u"] += ga_u.T @ x
    g["b_u"] += ga_u.sum(0)
    if m is not None:
        g["V"] += ga_c.T @ m
        g["V_r"] += ga_r.T @ m
        g["V_u"] += ga_u.T @ m

    gh_prev = gh * (1.0 - u) + g_hr * r + ga_r @ p["W_r"] + ga_u @ p["W_u"]
    gx = ga_c @ p["R"] + ga_r @ p["R_r"] + ga_u @ p["R_u"]
    return gh_prev, gx


def backward(params: CellParams, cache: ForwardCache, labels, spec: LossSpec) -> dict[str, np.ndarray]:
    """Exact gradient of :func:`loss` for the pass recorded in ``cache``.

    The ReLU inside the decay rates takes subgradient 0 at the kink. The
    probability clamp is ignored (it only binds at |logit gap| > ~27).
    """
    y = np.asarray(labels, dtype=np.float64)
    B = y.shape[0]
    alpha = np.where(y > 0.5, spec.alpha[1], spec.alpha[0])
    coef = alpha * (cache.probs[:, 1] - y) / B
    gz = np.stack([-coef, coef], axis=1)

    g = {k: np.zeros_like(v) for k, v in params.weights.items()}
    g["W_o"] += gz.T @ cache.hd
    g["b_o"] += gz.sum(0)
    gh = gz @ params["W_o"]
    if cache.drop is not None:
        gh = gh * cache.drop

    T = cache.inputs.shape[1]
    kind = cache.kind
    for t in range(T - 1, -1, -1):
        if kind is CellKind.ERNN:
            h_t, h_prev, x = cache.hs[t + 1], cache.hs[t], cache.inputs[:, t]
            ga = gh * (1.0 - h_t * h_t)
            g["W_h"] += ga.T @ h_prev
            g["W_i"] += ga.T @ x
            g["b_h"] += ga.sum(0)
            gh = ga @ params["W_h"]
        elif kind is CellKind.GRU:
            x, h_prev, gates = cache.steps[t]
            gh, _ = _gru_backward(params, g, gh, x, h_prev, gates)
        else:
            x_hat, h_dec, gates, decay, x_last = cache.steps[t]
            a_gx, a_gh, gamma_x, gamma_h = decay
            m, delta, h_prev = cache.mask[:, t], cache.deltas[:, t], cache.hs[t]
            g_hdec, g_xhat = _gru_backward(params, g, gh, x_hat, h_dec, gates, m)

            ga_gh = -(g_hdec * h_prev) * gamma_h * (a_gh > 0)
            g["W_gh"] += ga_gh.T @ delta
            g["b_gh"] += ga_gh.sum(0)

            ga_gx = -(g_xhat * (1.0 - m) * (x_last - params.input_means)) * gamma_x * (a_gx > 0)
            g["w_gx"] += (ga_gx * delta).sum(0)
            g["b_gx"] += ga_gx.sum(0)

            gh = g_hdec * gamma_h

    if spec.lam > 0:
        names = params.regularized()
        if spec.reg == "sumsq":
            scale = 2.0 * spec.lam
        else:
            norm = np.sqrt(sum(float(np.sum(params[k] ** 2)) for k in names))
            scale = spec.lam / norm if norm > 0 else 0.0
        for k in names:
            g[k] += scale * params[k]

    for k, v in g.items():
        if not np.isfinite(v).all():
            raise NumericError(f"non-finite gradient for parameter {k}")
    return g


def gradients(params: CellParams, batch: Batch, spec: LossSpec, drop=None) -> tuple[float, dict]:
    """Loss and its exact gradient on ``batch`` (with an optional dropout mask)."""
    p, _, cache = run(params, batch, drop)
    return loss(p, batch.labels, spec, params), backward(params, cache, batch.labels, spec)


def gradient_errors(params: CellParams, batch: Batch, spec: LossSpec, eps: float = 1e-6, drop=None, names=None):
    """Per-parameter max relative error of analytic vs central-difference gradients.

    Relative error uses ``max(|a|, |n|, 1e-8)`` as the denominator.
    ``names`` restricts the check to a subset of parameters.
    """
    if not 1e-8 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-8, 1e-4]")
    _, analytic = gradients(params, batch, spec, drop)

    def objective():
        p, _, _ = run(params, batch, drop)
        return loss(p, batch.labels, spec, params)

    errors = {}
    for name, w in params.weights.items():
        if names is not None and name not in names:
            continue
        numeric = np.zeros_like(w)
        flat, nflat = w.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = objective()
            flat[i] = orig - eps
            down = objective()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * eps)
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        errors[name] = float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0
    return errors


def finite_difference_check(
    params: CellParams, batch: Batch, spec: LossSpec, eps: float = 1e-6, drop=None, names=None
) -> float:
    return max(gradient_errors(params, batch, spec, eps, drop, names).values())


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


class Adam:
    """Adam with bias-corrected moments; updates parameter arrays in place."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[k] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    hidden_size: int = 22
    dropout_rate: float = 0.2
    lam: float = 0.001
    batch_size: int = 40
    epochs: int = 10_000
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    reg: str = "sumsq"
    decay_init: float = 0.01
    threshold: float = 0.5

    def __post_init__(self):
        if self.hidden_size < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("hidden_size and batch_size must be positive, epochs nonnegative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_f1: float
    val_auc: float


@dataclass
class TrainState:
    params: CellParams
    optimizer: Adam
    rng: np.random.Generator
    epoch: int = 0
    best_f1: float = float("-inf")
    best_epoch: int = 0
    best_params: CellParams | None = None
    history: list[EpochRecord] = field(default_factory=list)


@dataclass
class TrainResult:
    params: CellParams
    history: list[EpochRecord]
    best_f1: float
    best_epoch: int
    final_params: CellParams


def predict(params: CellParams, batch: Batch, chunk: int = 1024):
    """Class-1 probabilities and final hidden states, dropout off."""
    ps, hs = [], []
    for start in range(0, len(batch), chunk):
        p, h, _ = run(params, batch.take(slice(start, start + chunk)))
        ps.append(p)
        hs.append(h)
    return np.concatenate(ps), np.concatenate(hs)


def prepare(kind, episodes: EpisodeSet, imputation: ImputationMethod | None) -> Batch:
    kind = CellKind(kind)
    if kind is CellKind.GRUD:
        if imputation is not None:
            raise ConfigError("GRU-D consumes missing values directly; do not impute")
    elif imputation is None:
        raise ConfigError(f"{kind.value} needs an imputation method")
    else:
        episodes = impute_episodes(episodes, imputation)
    return Batch.from_episodes(episodes, kind)


def train(
    config: TrainConfig,
    kind,
    train_set: EpisodeSet,
    val_set: EpisodeSet,
    imputation: ImputationMethod | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Mini-batch Adam training with best-validation-F1 checkpointing."""
    kind = CellKind(kind)
    train_batch = prepare(kind, train_set, imputation)
    val_batch = prepare(kind, val_set, imputation)
    if len(train_batch) == 0 or len(val_batch) == 0:
        raise ConfigError("training and validation sets must be nonempty")
    spec = LossSpec(class_weights(train_set.labels), config.lam, config.reg)

    rng = np.random.default_rng(config.seed)
    params = init_params(
        kind, train_set.n_vars, config.hidden_size, rng, train_set.empirical_means, config.decay_init
    )
    opt = Adam(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_epsilon)
    state = TrainState(params, opt, rng, best_params=params.copy())

    n = len(train_batch)
    for epoch in range(1, config.epochs + 1):
        order = state.rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            batch = train_batch.take(order[start : start + config.batch_size])
            drop = dropout_mask(state.rng, (len(batch), config.hidden_size), config.dropout_rate)
            value, grads = gradients(state.params, batch, spec, drop)
            state.optimizer.step(state.params.weights, grads)
            losses.append(value)
        p_val, _ = predict(state.params, val_batch)
        y_val = val_batch.labels.astype(int)
        rec = EpochRecord(
            epoch,
            float(np.mean(losses)),
            f1_score((p_val >= config.threshold).astype(int), y_val),
            auc(p_val, y_val) if 0 < y_val.sum() < len(y_val) else float("nan"),
        )
        state.history.append(rec)
        state.epoch = epoch
        if rec.val_f1 > state.best_f1:
            state.best_f1, state.best_epoch = rec.val_f1, epoch
            state.best_params = state.params.copy()
        if on_epoch is not None:
            on_epoch(rec)
        log.debug("epoch %d loss %.5f val_f1 %.4f val_auc %.4f", epoch, rec.train_loss, rec.val_f1, rec.val_auc)

    best_f1 = state.best_f1 if state.history else float("nan")
    return TrainResult(state.best_params, state.history, best_f1, state.best_epoch, state.params)
