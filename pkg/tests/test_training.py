import math

import numpy as np
import pytest

from grudkit.cells import CellKind, init_params
from grudkit.dataset import EpisodeSet, compute_deltas
from grudkit import training
from grudkit.imputation import ImputationMethod
from grudkit.training import (
    Adam,
    Batch,
    ConfigError,
    LossSpec,
    TrainConfig,
    backward,
    finite_difference_check,
    gradient_errors,
    gradients,
    loss,
    predict,
    prepare,
    run,
    train,
)


def random_instance(kind, rng, V=3, H=4, T=5, B=2):
    params = init_params(kind, V, H, rng, input_means=rng.normal(size=V))
    for w in params.weights.values():
        w[...] = rng.normal(scale=0.5, size=w.shape)
    values = rng.normal(size=(B, T, V))
    labels = np.array([1.0, 0.0] * (B // 2) + [1.0] * (B % 2))
    if kind is CellKind.GRUD:
        mask = (rng.random((B, T, V)) < 0.6).astype(float)
        values[mask == 0] = np.nan
        stamps = np.cumsum(rng.uniform(0.5, 2.0, size=(B, T)), axis=1)
        return params, Batch(values, labels, mask, compute_deltas(mask, stamps))
    return params, Batch(values, labels)


def separable_toy(seed=0):
    """Ten series; variable 0 sits at +1 for positives and -1 for negatives."""
    rng = np.random.default_rng(seed)
    labels = np.array([0, 1] * 5)
    values = rng.normal(scale=0.3, size=(10, 5, 2))
    values[:, :, 0] += np.where(labels == 1, 1.0, -1.0)[:, None]
    return EpisodeSet.from_arrays(values, np.arange(5.0), labels)


class TestLoss:
    def test_ln2(self):
        assert loss([0.5], [1], LossSpec((1.0, 1.0), 0.0)) == pytest.approx(math.log(2), abs=1e-12)

    def test_perfect_prediction_clamped(self):
        assert loss([1.0], [1], LossSpec((1.0, 1.0))) == pytest.approx(0.0, abs=1e-11)
        assert np.isfinite(loss([0.0], [1], LossSpec((1.0, 1.0))))

    def test_weighted_mean(self):
        assert loss([0.5, 0.5], [1, 0], LossSpec((0.2, 0.8))) == pytest.approx(0.5 * math.log(2), abs=1e-12)

    def test_regularizer(self, rng):
        params, batch = random_instance(CellKind.GRU, rng)
        p = run(params, batch)[0]
        plain = loss(p, batch.labels, LossSpec((0.5, 0.5), 0.0), params)
        reg = loss(p, batch.labels, LossSpec((0.5, 0.5), 0.01), params)
        sumsq = sum(np.sum(params[k] ** 2) for k in params.weights if not k.startswith("b"))
        assert reg - plain == pytest.approx(0.01 * sumsq, rel=1e-12)
        assert reg > plain >= 0

    def test_biases_excluded(self, rng):
        params, batch = random_instance(CellKind.ERNN, rng)
        spec = LossSpec((0.5, 0.5), 0.1)
        p = run(params, batch)[0]
        before = loss(p, batch.labels, spec, params)
        params["b_o"][...] += 100.0
        assert loss(p, batch.labels, spec, params) == before


class TestGradients:
    @pytest.mark.parametrize("kind", list(CellKind))
    @pytest.mark.parametrize("reg", ["sumsq", "norm"])
    def test_finite_differences(self, kind, reg, rng):
        params, batch = random_instance(kind, rng)
        drop = np.where(rng.random((2, 4)) < 0.8, 1.25, 0.0)
        assert finite_difference_check(params, batch, LossSpec((0.3, 0.7), 0.01, reg), 1e-6, drop) < 1e-4

    def test_readout_bias_closed_form(self, rng):
        params, batch = random_instance(CellKind.GRU, rng, B=6)
        params["W_o"][...] = 0.0
        spec = LossSpec((0.3, 0.7), 0.0)
        p, _, cache = run(params, batch)
        g = backward(params, cache, batch.labels, spec)
        alpha = np.where(batch.labels == 1, 0.7, 0.3)
        expected = np.mean(alpha * (p - batch.labels))
        np.testing.assert_allclose(g["b_o"], [-expected, expected], atol=1e-15)
        assert gradient_errors(params, batch, spec, names={"b_o"})["b_o"] < 1e-6

    def test_readout_only_against_closed_form(self, rng):
        params = init_params(CellKind.ERNN, 3, 4, rng)
        params["W_i"][...] = rng.choice([-2.0, 2.0], size=(4, 3))
        params["W_o"][...] = 0.0
        batch = Batch(np.ones((1, 1, 3)), np.array([1.0]))
        spec = LossSpec((1.0, 1.0), 0.0)
        p, h, cache = run(params, batch)
        g = backward(params, cache, batch.labels, spec)
        coef = p[0] - 1.0
        np.testing.assert_allclose(g["W_o"], np.outer([-coef, coef], h[0]), atol=1e-15)
        assert finite_difference_check(params, batch, spec, 1e-5, names={"W_o", "b_o"}) < 1e-9

    def test_dead_decay_region(self, rng):
        params, batch = random_instance(CellKind.GRUD, rng)
        params["w_gx"][...] = -1.0
        params["b_gx"][...] = -1.0
        _, g = gradients(params, batch, LossSpec((0.5, 0.5), 0.0))
        assert (g["w_gx"] == 0).all() and (g["b_gx"] == 0).all()
        errs = gradient_errors(params, batch, LossSpec((0.5, 0.5), 0.0), names={"w_gx", "b_gx"})
        assert errs["w_gx"] == 0.0 and errs["b_gx"] == 0.0

    def test_eps_range(self, rng):
        params, batch = random_instance(CellKind.ERNN, rng)
        with pytest.raises(ValueError):
            finite_difference_check(params, batch, LossSpec(), eps=1e-3)


class TestAdam:
    def test_first_step_is_sign(self):
        for g in (3.0, -0.002):
            w = {"x": np.array([1.0])}
            Adam(lr=0.01).step(w, {"x": np.array([g])})
            assert w["x"][0] == pytest.approx(1.0 - 0.01 * np.sign(g), abs=1e-7)

    def test_zero_gradient(self):
        opt = Adam()
        w = {"x": np.array([1.0, 2.0])}
        opt.step(w, {"x": np.array([1.0, -1.0])})
        before = w["x"].copy()
        m_before = opt.m["x"].copy()
        opt.step(w, {"x": np.zeros(2)})
        np.testing.assert_allclose(opt.m["x"], 0.9 * m_before)
        assert np.all(w["x"] != before)  # momentum keeps moving
        opt2 = Adam()
        w2 = {"x": np.array([1.0])}
        opt2.step(w2, {"x": np.zeros(1)})
        assert w2["x"][0] == 1.0

    def test_deterministic(self, rng):
        g = {"x": rng.normal(size=5)}
        ws = []
        for _ in range(2):
            w = {"x": np.ones(5)}
            opt = Adam()
            for _ in range(3):
                opt.step(w, g)
            ws.append(w["x"])
        np.testing.assert_array_equal(*ws)


class TestTrain:
    def setup_method(self):
        self.ep = separable_toy()
        self.tr, self.va = self.ep.subset(range(8)), self.ep.subset([8, 9])

    def _imp(self, kind):
        return None if kind == "grud" else ImputationMethod.from_training("zero", self.tr)

    def test_zero_epochs(self):
        res = train(TrainConfig(epochs=0, seed=4), "gru", self.tr, self.va, self._imp("gru"))
        fresh = init_params("gru", 2, 22, np.random.default_rng(4), self.tr.empirical_means)
        assert res.history == []
        for k in fresh.weights:
            np.testing.assert_array_equal(res.params[k], fresh[k])

    @pytest.mark.parametrize("kind", ["ernn", "gru", "grud"])
    def test_separable_toy(self, kind):
        res = train(TrainConfig(epochs=200, seed=1), kind, self.tr, self.va, self._imp(kind))
        assert res.best_f1 == 1.0
        assert res.best_f1 == max(r.val_f1 for r in res.history)

    def test_deterministic_history(self):
        cfg = TrainConfig(epochs=15, seed=2, batch_size=3)
        a = train(cfg, "grud", self.tr, self.va)
        b = train(cfg, "grud", self.tr, self.va)
        assert [vars(r) for r in a.history] == [vars(r) for r in b.history]

    def test_best_is_first_maximum(self):
        res = train(TrainConfig(epochs=30, seed=3, batch_size=4), "ernn", self.tr, self.va, self._imp("ernn"))
        f1s = [r.val_f1 for r in res.history]
        assert res.best_epoch == int(np.argmax(f1s)) + 1

    def test_pairing_errors(self):
        with pytest.raises(ConfigError):
            train(TrainConfig(epochs=1), "grud", self.tr, self.va, self._imp("gru"))
        with pytest.raises(ConfigError):
            train(TrainConfig(epochs=1), "ernn", self.tr, self.va, None)

    def test_evaluation_ignores_dropout(self):
        res = train(TrainConfig(epochs=3, seed=0), "gru", self.tr, self.va, self._imp("gru"))
        batch = prepare("gru", self.va, self._imp("gru"))
        np.testing.assert_array_equal(predict(res.params, batch)[0], predict(res.params, batch)[0])

    def test_shuffle_is_permutation(self, monkeypatch):
        seen = []
        cfg = TrainConfig(epochs=2, seed=0, batch_size=3, dropout_rate=0.0)

        def spy(params, batch, spec, drop=None):
            seen.append(batch.values[:, 0, 1].copy())
            return gradients(params, batch, spec, drop)

        monkeypatch.setattr(training, "gradients", spy)
        train(cfg, "gru", self.tr, self.va, self._imp("gru"))
        epoch1 = np.sort(np.concatenate(seen[:3]))
        epoch2 = np.sort(np.concatenate(seen[3:]))
        np.testing.assert_array_equal(epoch1, np.sort(self.tr.values[:, 0, 1]))
        np.testing.assert_array_equal(epoch2, epoch1)
