import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grudkit.cells import (
    CellKind,
    CellParams,
    GrudRuntimeState,
    _grud_inputs,
    NumericError,
    decay_input,
    decay_rates,
    decay_state,
    dropout_mask,
    ernn_step,
    forward,
    gru_step,
    grud_step,
    init_params,
    load_checkpoint,
    run_batch,
    save_checkpoint,
)


def zero_params(kind, V=1, H=1):
    p = init_params(kind, V, H, np.random.default_rng(0))
    for w in p.weights.values():
        w[...] = 0.0
    return p


def random_params(kind, V, H, rng, scale=0.5):
    p = init_params(kind, V, H, rng, input_means=rng.normal(size=V))
    for w in p.weights.values():
        w[...] = rng.normal(scale=scale, size=w.shape)
    return p


def reduced_pair(rng, V, H):
    """A GRU and a GRU-D sharing GRU weights, with decays and mask weights off."""
    gru = random_params(CellKind.GRU, V, H, rng)
    grud = init_params(CellKind.GRUD, V, H, rng)
    for k, w in grud.weights.items():
        w[...] = gru.weights[k] if k in gru.weights else 0.0
    return gru, grud


class TestErnn:
    def test_zero_weights(self):
        p = zero_params(CellKind.ERNN, 2, 3)
        np.testing.assert_array_equal(ernn_step(p, np.ones(3), np.ones(2)), np.zeros(3))

    def test_single_unit(self):
        p = zero_params(CellKind.ERNN)
        p["W_i"][...] = 1.0
        assert ernn_step(p, np.zeros(1), np.array([0.5]))[0] == pytest.approx(0.46211715726, abs=1e-10)

    def test_saturation(self):
        p = zero_params(CellKind.ERNN)
        p["W_h"][...] = 1.0
        assert ernn_step(p, np.array([10.0]), np.zeros(1))[0] == pytest.approx(1.0, abs=1e-8)


class TestGru:
    def test_zero_weights(self):
        p = zero_params(CellKind.GRU)
        np.testing.assert_allclose(gru_step(p, np.array([1.0]), np.zeros(1)), [0.5])

    def test_update_gate_closed(self):
        p = zero_params(CellKind.GRU)
        p["b_u"][...] = -50.0
        p["b"][...] = 3.0
        np.testing.assert_allclose(gru_step(p, np.array([0.7]), np.zeros(1)), [0.7], atol=1e-15)

    def test_update_gate_open(self):
        p = zero_params(CellKind.GRU)
        p["b_u"][...] = 50.0
        np.testing.assert_allclose(gru_step(p, np.array([0.7]), np.zeros(1)), [0.0], atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_convex_combination(self, seed):
        rng = np.random.default_rng(seed)
        p = random_params(CellKind.GRU, 3, 4, rng, scale=2.0)
        h_prev = rng.uniform(-1, 1, 4)
        x = rng.normal(size=3)
        r = 1 / (1 + np.exp(-(p["W_r"] @ h_prev + p["R_r"] @ x + p["b_r"])))
        cand = np.tanh(p["W"] @ (h_prev * r) + p["R"] @ x + p["b"])
        h = gru_step(p, h_prev, x)
        assert (h >= np.minimum(h_prev, cand) - 1e-12).all()
        assert (h <= np.maximum(h_prev, cand) + 1e-12).all()


class TestDecay:
    def test_rates(self):
        assert decay_rates([[0.5]], [0.0], np.array([2.0]))[0] == pytest.approx(np.exp(-1.0), abs=1e-12)
        assert decay_rates([[-1.0]], [0.0], np.array([2.0]))[0] == 1.0
        assert decay_rates([[3.0]], [0.0], np.array([0.0]))[0] == 1.0

    @given(st.integers(0, 2**32 - 1))
    def test_rates_in_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        g = decay_rates(rng.normal(size=(4, 3)), rng.normal(size=4), rng.uniform(0, 10, size=3))
        assert ((g > 0) & (g <= 1)).all()

    def test_rates_monotone_for_nonnegative_weights(self, rng):
        W = rng.uniform(0, 1, size=(2, 2))
        d = np.array([1.0, 1.0])
        assert (decay_rates(W, [0.0, 0.0], d + [1.0, 0.0]) <= decay_rates(W, [0.0, 0.0], d)).all()

    def test_input(self):
        assert decay_input(np.array([7.0]), np.array([1.0]), np.array([0.3]), np.array([4.0]), np.array([2.0]))[0] == 7.0
        assert decay_input(np.array([np.nan]), np.array([0.0]), np.array([0.5]), np.array([4.0]), np.array([2.0]))[0] == 3.0
        assert decay_input(np.array([0.0]), np.array([0.0]), np.array([0.0]), np.array([4.0]), np.array([2.0]))[0] == 2.0

    @given(st.integers(0, 2**32 - 1))
    def test_input_passthrough_where_observed(self, seed):
        rng = np.random.default_rng(seed)
        x, g, last, mean = (rng.normal(size=5) for _ in range(4))
        m = (rng.random(5) < 0.5).astype(float)
        out = decay_input(x, m, np.abs(g), last, mean)
        np.testing.assert_array_equal(out[m == 1], x[m == 1])

    def test_state(self):
        np.testing.assert_array_equal(decay_state(np.array([2.0, -4.0]), np.array([0.5, 0.5])), [1.0, -2.0])
        np.testing.assert_array_equal(decay_state(np.array([2.0, -4.0]), np.ones(2)), [2.0, -4.0])
        np.testing.assert_array_equal(decay_state(np.zeros(2), np.array([0.3, 0.9])), [0.0, 0.0])


class TestGrudStep:
    def test_reduces_to_gru(self, rng):
        gru, grud = reduced_pair(rng, 3, 4)
        h = rng.uniform(-1, 1, 4)
        x = rng.normal(size=3)
        state = GrudRuntimeState(h, np.zeros(3))
        out = grud_step(grud, state, x, np.ones(3), rng.uniform(0, 3, 3))
        np.testing.assert_allclose(out.h, gru_step(gru, h, x), atol=1e-15)

    def test_all_missing_uses_means(self, rng):
        p = random_params(CellKind.GRUD, 2, 3, rng)
        state = GrudRuntimeState(np.zeros(3), p.input_means.copy())
        x, _, _ = _grud_inputs(p, state, np.array([np.nan, np.nan]), np.zeros(2), np.zeros(2))
        np.testing.assert_allclose(x, p.input_means, atol=1e-15)

    def test_x_last_update(self, rng):
        p = random_params(CellKind.GRUD, 1, 2, rng)
        s = GrudRuntimeState(np.zeros(2), p.input_means.copy())
        s = grud_step(p, s, np.array([1.25]), np.array([1.0]), np.array([0.0]))
        assert s.x_last[0] == 1.25
        s = grud_step(p, s, np.array([np.nan]), np.array([0.0]), np.array([1.0]))
        assert s.x_last[0] == 1.25


class TestForward:
    def test_zero_readout(self, rng):
        for kind in CellKind:
            p = random_params(kind, 2, 3, rng)
            p["W_o"][...] = 0.0
            p["b_o"][...] = 0.0
            values = rng.normal(size=(4, 2))
            assert forward(p, values)[0] == pytest.approx(0.5, abs=1e-15)

    def test_bias_only_softmax(self):
        p = zero_params(CellKind.ERNN)
        p["b_o"][...] = [0.0, 10.0]
        p_hat, _ = forward(p, np.zeros((1, 1)))
        assert p_hat == pytest.approx(1 / (1 + np.exp(-10.0)), abs=1e-15)
        assert p_hat == pytest.approx(0.9999546, abs=1e-7)

    def test_grud_matches_gru_when_reduced(self, rng):
        gru, grud = reduced_pair(rng, 3, 5)
        values = rng.normal(size=(6, 3))
        pg, hg = forward(gru, values)
        pd, hd = forward(grud, values)
        assert abs(pg - pd) < 1e-12
        np.testing.assert_allclose(hd, hg, atol=1e-12)

    def test_probabilities_normalized(self, rng):
        p = random_params(CellKind.GRUD, 3, 4, rng, scale=2.0)
        values = rng.normal(size=(5, 6, 3))
        values[rng.random(values.shape) < 0.5] = np.nan
        _, _, cache = run_batch(p, values)
        assert (cache.probs > 0).all()
        np.testing.assert_allclose(cache.probs.sum(axis=1), 1.0, atol=1e-15)

    def test_imputed_input_required(self, rng):
        p = random_params(CellKind.GRU, 2, 2, rng)
        with pytest.raises(ValueError, match="imputed"):
            forward(p, np.array([[1.0, np.nan]]))

    @pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
    def test_overflow_reports_step(self):
        p = zero_params(CellKind.ERNN)
        p["W_h"][...] = np.inf
        with pytest.raises(NumericError, match="time step 1"):
            forward(p, np.array([[0.0], [1.0]]))

    def test_deterministic_dropout(self, rng):
        p = random_params(CellKind.GRU, 2, 8, rng)
        values = rng.normal(size=(3, 4, 2))
        a = run_batch(p, values, drop=dropout_mask(np.random.default_rng(5), (3, 8), 0.2))[0]
        b = run_batch(p, values, drop=dropout_mask(np.random.default_rng(5), (3, 8), 0.2))[0]
        np.testing.assert_array_equal(a, b)


def test_init_shapes_and_decay_signs(rng):
    p = init_params(CellKind.GRUD, 10, 22, rng)
    assert p["W_r"].shape == (22, 22) and p["R_r"].shape == (22, 10) and p["V_u"].shape == (22, 10)
    assert p["w_gx"].shape == (10,) and p["W_gh"].shape == (22, 10)
    assert (p["w_gx"] >= 0).all() and (p["W_gh"] >= 0).all()
    assert all((p[k] == 0).all() for k in ("b_r", "b", "b_u", "b_gx", "b_gh", "b_o"))
    limit = np.sqrt(6 / 32)
    assert np.abs(p["R"]).max() <= limit


def test_checkpoint_round_trip(tmp_path, rng):
    p = random_params(CellKind.GRUD, 3, 4, rng)
    save_checkpoint(tmp_path / "c.json", p, t_len=7, seeds={"init": 3})
    q, meta = load_checkpoint(tmp_path / "c.json")
    assert q.kind is CellKind.GRUD and meta["t_len"] == 7 and meta["seeds"]["init"] == 3
    for k in p.weights:
        np.testing.assert_array_equal(q[k], p[k])
    np.testing.assert_array_equal(q.input_means, p.input_means)
    raw = json.loads((tmp_path / "c.json").read_text())
    assert raw["model"]["weights"]["W_gh"]["shape"] == [4, 3]
