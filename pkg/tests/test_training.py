import math

import numpy as np
import pytest

from timexer import autodiff as ad
from timexer.data import WindowSet
from timexer.errors import DataError, ShapeError, TrainingError
from timexer.model import init_params
from timexer.training import AdamState, adam_step, clip_grad_norm, evaluate, metrics, train, train_step


def quadratic_grad(w):
    with ad.Tape() as tape:
        loss = ad.sum(ad.parameter(w, "w") * ad.parameter(w, "w"))
    return ad.backward(loss, tape)


def random_windows(rng, n, config, c=2):
    return WindowSet(rng.normal(size=(n, config.lookback)), rng.normal(size=(n, c, config.exo_len)),
                     rng.normal(size=(n, config.horizon)), np.arange(n), ())


class TestAdam:
    def test_zero_gradient(self):
        params, state = {"w": np.array([1.0, 2.0])}, AdamState()
        adam_step(params, {"w": np.zeros(2)}, state)
        assert params["w"].tolist() == [1.0, 2.0] and state.t == 1

    def test_first_step_is_lr_sign(self):
        params, state = {"w": np.array([0.5])}, AdamState(lr=1e-3)
        adam_step(params, {"w": np.array([1.0])}, state)
        assert abs((params["w"][0] - 0.5) + 1e-3) < 1e-6 * 1e-3

    def test_scalar_descent(self):
        params, state = {"w": np.array(1.0)}, AdamState(lr=0.1)
        for _ in range(100):
            adam_step(params, quadratic_grad(params["w"]), state)
        assert abs(float(params["w"])) < 0.5
        # pure-Python Adam run on f(w) = w^2, same hyperparameters
        assert float(params["w"]) == pytest.approx(0.002936675681102549, abs=1e-12)

    def test_step_decreases_convex_quadratic(self, rng):
        w = rng.normal(size=5)
        params = {"w": w.copy()}
        adam_step(params, quadratic_grad(w), AdamState(lr=1e-3))
        assert np.sum(params["w"] ** 2) < np.sum(w ** 2)

    def test_preserves_dtype_and_untouched(self):
        params = {"a": np.ones(3, dtype=np.float32), "b": np.ones(2)}
        state = AdamState()
        adam_step(params, {"a": np.ones(3)}, state)
        assert params["a"].dtype == np.float32
        assert params["b"].tolist() == [1.0, 1.0]
        assert np.all(state.v["a"] >= 0)

    def test_unknown_gradient(self):
        with pytest.raises(KeyError):
            adam_step({"a": np.ones(1)}, {"z": np.ones(1)}, AdamState())

    def test_shape_mismatch_names_parameter(self):
        with pytest.raises(ShapeError, match="head.weight"):
            adam_step({"head.weight": np.ones((2, 2))}, {"head.weight": np.ones(3)}, AdamState())


class TestMetrics:
    def test_perfect(self):
        assert metrics(np.ones((2, 3)), np.ones((2, 3))) == {"mse": 0.0, "mae": 0.0}

    def test_constant_error(self):
        assert metrics(np.ones((2, 3)), np.zeros((2, 3))) == {"mse": 1.0, "mae": 1.0}

    def test_hand_arithmetic(self):
        assert metrics(np.array([[0.0], [2.0]]), np.zeros((2, 1))) == {"mse": 2.0, "mae": 1.0}

    def test_empty_rejected(self, tiny_config):
        empty = WindowSet(np.zeros((0, 8)), np.zeros((0, 2, 8)), np.zeros((0, 3)), np.zeros(0), ())
        with pytest.raises(DataError):
            evaluate(init_params(tiny_config), tiny_config, empty)

    def test_denormalized(self, rng, tiny_config):
        w = random_windows(rng, 6, tiny_config)
        params = init_params(tiny_config)
        norm = evaluate(params, tiny_config, w)
        raw = evaluate(params, tiny_config, w, endo_stats=(10.0, 3.0), denormalize=True)
        assert raw["mse"] == pytest.approx(9.0 * norm["mse"])
        with pytest.raises(DataError):
            evaluate(params, tiny_config, w, denormalize=True)


class TestClip:
    def test_scales_to_max_norm(self):
        grads, total = clip_grad_norm({"a": np.array([3.0]), "b": np.array([4.0])}, 1.0)
        assert total == 5.0
        assert math.isclose(math.hypot(grads["a"][0], grads["b"][0]), 1.0, rel_tol=1e-9)


class TestTrain:
    def test_overfit_single_batch(self, rng, tiny_config):
        c = tiny_config.replace(model_dim=8, lr=1e-2, batch_size=8)
        batch = random_windows(rng, 8, c)
        params = {k: np.asarray(v, dtype=np.float64) for k, v in init_params(c).items()}
        state = AdamState(lr=c.lr)
        for _ in range(200):
            loss = train_step(params, c, batch, state)
        assert loss < 1e-2

    def test_patience_returns_best_epoch(self, rng, tiny_config):
        c = tiny_config.replace(patience=1, max_epochs=10)
        seen = []
        scores = iter([1.0, 2.0, 3.0])

        def val_fn(p):
            seen.append({k: v.copy() for k, v in p.items()})
            return next(scores)

        best, report = train(init_params(c), c, random_windows(rng, 16, c), random_windows(rng, 4, c), val_fn)
        assert len(report.epochs) == 2 and report.stop_reason == "patience" and report.best_epoch == 1
        assert all(np.array_equal(best[k], seen[0][k]) for k in best)
        assert report.best_val_mse == min(e.val_mse for e in report.epochs)

    def test_bitwise_reproducible(self, rng, tiny_config):
        c = tiny_config.replace(dropout=0.2, max_epochs=3, batch_size=4)
        tr, va = random_windows(rng, 20, c), random_windows(rng, 6, c)
        a, ra = train(init_params(c), c, tr, va)
        b, rb = train(init_params(c), c, tr, va)
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)
        assert [(e.train_mse, e.val_mse) for e in ra.epochs] == [(e.train_mse, e.val_mse) for e in rb.epochs]

    def test_does_not_mutate_input(self, rng, tiny_config):
        c = tiny_config.replace(max_epochs=1)
        params = init_params(c)
        snapshot = {k: v.copy() for k, v in params.items()}
        train(params, c, random_windows(rng, 8, c), random_windows(rng, 4, c))
        assert all(np.array_equal(params[k], snapshot[k]) for k in params)

    def test_non_finite_loss(self, rng, tiny_config):
        c = tiny_config.replace(batch_size=4)
        tr = random_windows(rng, 8, c)
        tr.target[5, 0] = np.nan
        with pytest.raises(TrainingError, match="epoch 1, batch"):
            train(init_params(c), c, tr, random_windows(rng, 4, c))

    def test_empty_sets(self, rng, tiny_config):
        empty = random_windows(rng, 4, tiny_config)[[]]
        with pytest.raises(DataError):
            train(init_params(tiny_config), tiny_config, empty, random_windows(rng, 4, tiny_config))

    def test_on_epoch_callback(self, rng, tiny_config):
        c = tiny_config.replace(max_epochs=2, patience=5)
        records = []
        train(init_params(c), c, random_windows(rng, 8, c), random_windows(rng, 4, c), on_epoch=records.append)
        assert [r.epoch for r in records] == [1, 2]
