"""ERNN, GRU and GRU-D cells with a two-logit softmax readout.

Everything is batched along the leading axis: hidden states are ``(B, H)``,
inputs ``(B, V)``, and weight matrices are stored ``(out, in)`` so a
pre-activation reads ``h @ W.T + x @ R.T + b``. Single vectors work too.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .dataset import compute_deltas


class NumericError(ArithmeticError):
    """Non-finite activation or gradient."""


class CellKind(str, Enum):
    ERNN = "ernn"
    GRU = "gru"
    GRUD = "grud"


_READOUT = ("W_o", "b_o")
_GRU = ("W_r", "R_r", "b_r", "W", "R", "b", "W_u", "R_u", "b_u")
_GRUD_EXTRA = ("V_r", "V", "V_u", "w_gx", "b_gx", "W_gh", "b_gh")

PARAM_NAMES = {
    CellKind.ERNN: ("W_i", "W_h", "b_h") + _READOUT,
    CellKind.GRU: _GRU + _READOUT,
    CellKind.GRUD: _GRU + _GRUD_EXTRA + _READOUT,
}


def is_bias(name: str) -> bool:
    return name.startswith("b_") or name == "b"


@dataclass
class CellParams:
    """Trainable weights of one model plus the (non-trainable) input means.

    ``w_gx`` holds the diagonal of the input-decay matrix.
    """

    kind: CellKind
    weights: dict[str, np.ndarray]
    input_means: np.ndarray = field(default=None)

    def __post_init__(self):
        self.kind = CellKind(self.kind)
        if self.input_means is None:
            self.input_means = np.zeros(self.n_vars)

    @property
    def hidden_size(self) -> int:
        return self.weights["W_o"].shape[1]

    @property
    def n_vars(self) -> int:
        key = "W_i" if self.kind is CellKind.ERNN else "R"
        return self.weights[key].shape[1]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.weights[name]

    def copy(self) -> "CellParams":
        return CellParams(self.kind, {k: v.copy() for k, v in self.weights.items()}, self.input_means.copy())

    def regularized(self):
        """Names of weight matrices entering the L2 penalty (biases excluded)."""
        return [k for k in self.weights if not is_bias(k)]


def _glorot(rng, rows, cols):
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def init_params(
    kind,
    n_vars: int,
    hidden_size: int,
    rng: np.random.Generator,
    input_means=None,
    decay_init: float = 0.01,
) -> CellParams:
    """Glorot-uniform matrices, zero biases, small nonnegative decay weights."""
    kind = CellKind(kind)
    H, V = hidden_size, n_vars
    shapes = {"W_o": (2, H), "b_o": (2,)}
    if kind is CellKind.ERNN:
        shapes.update(W_i=(H, V), W_h=(H, H), b_h=(H,))
    else:
        for gate in ("_r", "", "_u"):
            shapes["W" + gate] = (H, H)
            shapes["R" + gate] = (H, V)
            shapes["b" + gate] = (H,)
    if kind is CellKind.GRUD:
        shapes.update(V_r=(H, V), V=(H, V), V_u=(H, V), w_gx=(V,), b_gx=(V,), W_gh=(H, V), b_gh=(H,))
    weights = {}
    for name in PARAM_NAMES[kind]:
        shape = shapes[name]
        if is_bias(name):
            weights[name] = np.zeros(shape)
        elif name in ("w_gx", "W_gh"):
            weights[name] = rng.uniform(0.0, decay_init, size=shape)
        else:
            weights[name] = _glorot(rng, *shape)
    return CellParams(kind, weights, None if input_means is None else np.asarray(input_means, float))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --------------------------------------------------------------------------
# single-step dynamics
# --------------------------------------------------------------------------


def ernn_step(p, h_prev, x):
    return np.tanh(h_prev @ p["W_h"].T + x @ p["W_i"].T + p["b_h"])


def _gru_update(p, h_prev, x, m=None):
    """GRU equations; with a mask ``m`` the GRU-D mask terms are added."""
    a_r = h_prev @ p["W_r"].T + x @ p["R_r"].T + p["b_r"]
    a_u = h_prev @ p["W_u"].T + x @ p["R_u"].T + p["b_u"]
    a_c = x @ p["R"].T + p["b"]
    if m is not None:
        a_r = a_r + m @ p["V_r"].T
        a_u = a_u + m @ p["V_u"].T
        a_c = a_c + m @ p["V"].T
    r = sigmoid(a_r)
    u = sigmoid(a_u)
    c = np.tanh((h_prev * r) @ p["W"].T + a_c)
    h = (1.0 - u) * h_prev + u * c
    return h, (r, u, c)


def gru_step(p, h_prev, x):
    return _gru_update(p, h_prev, x)[0]


def decay_rates(W, b, delta):
    """``exp(-max(0, W delta + b))``; accepts a single delta vector or a batch."""
    return np.exp(-np.maximum(0.0, delta @ np.asarray(W).T + b))


def decay_input(x, m, gamma_x, x_last, means):
    x = np.where(m > 0, x, 0.0)
    return m * x + (1.0 - m) * (gamma_x * x_last + (1.0 - gamma_x) * means)


def decay_state(h_prev, gamma_h):
    return gamma_h * h_prev


@dataclass
class GrudRuntimeState:
    h: np.ndarray
    x_last: np.ndarray


def _grud_inputs(p, state, x_raw, m, delta):
    a_gx = delta * p["w_gx"] + p["b_gx"]
    a_gh = delta @ p["W_gh"].T + p["b_gh"]
    gamma_x = np.exp(-np.maximum(0.0, a_gx))
    gamma_h = np.exp(-np.maximum(0.0, a_gh))
    x = decay_input(x_raw, m, gamma_x, state.x_last, p.input_means)
    h_dec = decay_state(state.h, gamma_h)
    return x, h_dec, (a_gx, a_gh, gamma_x, gamma_h)


def grud_step(p: CellParams, state: GrudRuntimeState, x_raw, m, delta) -> GrudRuntimeState:
    x, h_dec, _ = _grud_inputs(p, state, x_raw, m, delta)
    h, _ = _gru_update(p, h_dec, x, m)
    x_last = np.where(m > 0, x_raw, state.x_last)
    return GrudRuntimeState(h, x_last)


# --------------------------------------------------------------------------
# sequence forward pass
# --------------------------------------------------------------------------


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    """Inverted dropout: kept units are scaled by ``1 / (1 - rate)``."""
    if rate <= 0.0:
        return np.ones(shape)
    keep = 1.0 - rate
    return (rng.random(shape) < keep) / keep


def readout(p, h_T, drop=None):
    """Softmax over two logits; returns (probabilities ``(B, 2)``, dropped state)."""
    hd = h_T if drop is None else h_T * drop
    z = hd @ p["W_o"].T + p["b_o"]
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True), hd


@dataclass
class ForwardCache:
    """Intermediates kept for backpropagation through time."""

    kind: CellKind
    hs: list  # h_0 .. h_T
    inputs: np.ndarray  # (B, T, V); imputed inputs, or raw values with 0 at gaps for GRU-D
    steps: list = field(default_factory=list)
    mask: np.ndarray | None = None
    deltas: np.ndarray | None = None
    hd: np.ndarray | None = None
    drop: np.ndarray | None = None
    probs: np.ndarray | None = None


def run_batch(params: CellParams, values, mask=None, deltas=None, timestamps=None, drop=None):
    """Process a batch ``(B, T, V)`` from ``h_0 = 0``.

    ERNN and GRU expect fully observed (imputed) values. For GRU-D, NaN marks
    missing entries unless ``mask`` is given; ``deltas`` are derived from
    ``timestamps`` (default ``0..T-1``) when absent.

    Returns ``(p_hat, h_T, cache)`` with ``p_hat`` the class-1 probability and
    ``h_T`` the final state before dropout.
    """
    values = np.asarray(values, dtype=np.float64)
    B, T, V = values.shape
    kind = params.kind
    h = np.zeros((B, params.hidden_size))
    hs = [h]
    steps = []
    if kind is CellKind.GRUD:
        if mask is None:
            mask = (~np.isnan(values)).astype(np.float64)
        if deltas is None:
            if timestamps is None:
                timestamps = np.arange(T, dtype=np.float64)
            deltas = compute_deltas(mask, np.broadcast_to(timestamps, (B, T)))
        inputs = np.where(mask > 0, values, 0.0)
        state = GrudRuntimeState(h, np.broadcast_to(params.input_means, (B, V)).copy())
    else:
        if np.isnan(values).any():
            raise ValueError(f"{kind.value} needs imputed input; found missing entries")
        inputs = values
    for t in range(T):
        x_t = inputs[:, t]
        if kind is CellKind.ERNN:
            h = ernn_step(params, h, x_t)
            steps.append(None)
        elif kind is CellKind.GRU:
            h, gates = _gru_update(params, h, x_t)
            steps.append((x_t, hs[-1], gates))
        else:
            m_t = mask[:, t]
            x_hat, h_dec, decay = _grud_inputs(params, state, x_t, m_t, deltas[:, t])
            h, gates = _gru_update(params, h_dec, x_hat, m_t)
            steps.append((x_hat, h_dec, gates, decay, state.x_last))
            state = GrudRuntimeState(h, np.where(m_t > 0, x_t, state.x_last))
        if not np.isfinite(h).all():
            raise NumericError(f"non-finite hidden state at time step {t + 1}")
        hs.append(h)
    probs, hd = readout(params, h, drop)
    cache = ForwardCache(kind, hs, inputs, steps, mask, deltas, hd, drop, probs)
    return probs[:, 1], h, cache


def forward(params: CellParams, series, drop=None):
    """Single-series forward pass: returns (p_hat, h_T).

    ``series`` is a :class:`~grudkit.dataset.MaskedSeries` or a ``(T, V)``
    array (NaN marks missing entries for GRU-D).
    """
    values = getattr(series, "values", series)
    timestamps = getattr(series, "timestamps", None)
    if drop is not None:
        drop = np.asarray(drop)[None]
    p, h_T, _ = run_batch(params, np.asarray(values)[None], timestamps=timestamps, drop=drop)
    return float(p[0]), h_T[0]


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def params_to_dict(params: CellParams) -> dict:
    return {
        "cell": params.kind.value,
        "n_vars": params.n_vars,
        "hidden_size": params.hidden_size,
        "input_means": params.input_means.tolist(),
        "weights": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in params.weights.items()},
    }


def params_from_dict(d: dict) -> CellParams:
    kind = CellKind(d["cell"])
    weights = {
        k: np.asarray(w["data"], dtype=np.float64).reshape(w["shape"]) for k, w in d["weights"].items()
    }
    missing = set(PARAM_NAMES[kind]) - set(weights)
    if missing:
        raise ValueError(f"checkpoint lacks parameters {sorted(missing)}")
    return CellParams(kind, weights, np.asarray(d["input_means"], dtype=np.float64))


def save_checkpoint(path, params: CellParams, **meta) -> None:
    """JSON checkpoint: cell kind, dimensions, row-major weights, and metadata."""
    payload = {"format": "grudkit-checkpoint/1", "model": params_to_dict(params), **meta}
    Path(path).write_text(json.dumps(payload, indent=1, default=_jsonable) + "\n")


def load_checkpoint(path) -> tuple[CellParams, dict]:
    payload = json.loads(Path(path).read_text())
    return params_from_dict(payload.pop("model")), payload


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Enum):
        return obj.value
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
