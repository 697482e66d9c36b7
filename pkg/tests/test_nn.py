import numpy as np
import pytest

from pfrp.errors import DataError, ShapeError, StaleCacheError
from pfrp.nn import (
    adam_step,
    init_adam,
    init_mlp,
    load_model,
    mlp_backward,
    mlp_forward,
    model_from_dict,
    model_to_dict,
    save_model,
    sigmoid,
    softmax,
    softmax_backward,
    zero_mlp,
)


class TestActivations:
    def test_softmax_sums_to_one_for_large_inputs(self):
        p = softmax(np.array([1000.0, 1001.0, 999.0]))
        assert np.all(np.isfinite(p))
        assert abs(p.sum() - 1.0) < 1e-12

    def test_softmax_closed_form(self):
        np.testing.assert_allclose(softmax(np.array([np.log(3.0), 0.0])), [0.75, 0.25], atol=1e-12)

    def test_sigmoid_bounds(self):
        s = sigmoid(np.random.default_rng(0).uniform(-30, 30, size=1000))
        assert np.all((s > 0) & (s < 1))

    def test_sigmoid_saturation_stays_open(self):
        s = sigmoid(np.array([-1000.0, -50.0, 50.0, 1000.0]))
        assert np.all((s > 0) & (s < 1))

    def test_softmax_backward(self, fd, rel_err):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(3, 5))
        u = rng.normal(size=(3, 5))
        analytic = softmax_backward(softmax(z, axis=1), u, axis=1)
        numeric = fd(lambda: float(np.sum(softmax(z, axis=1) * u)), [z])
        assert rel_err([analytic], numeric) < 1e-6


class TestMlp:
    def test_shapes(self, rng):
        model = init_mlp([5, 7, 3], rng)
        out, cache = mlp_forward(model, rng.normal(size=(4, 5)))
        assert out.shape == (4, 3)
        assert model.parameter_count() == 5 * 7 + 7 + 7 * 3 + 3

    def test_zero_model_sigmoid_is_half(self):
        out, _ = mlp_forward(zero_mlp([4, 3, 1], "sigmoid"), np.ones((2, 4)))
        np.testing.assert_array_equal(out, 0.5)

    def test_zero_output_init(self, rng):
        model = init_mlp([4, 6, 2], rng, zero_output=True)
        out, _ = mlp_forward(model, rng.normal(size=(3, 4)))
        np.testing.assert_array_equal(out, 0.0)

    def test_wrong_width(self, rng):
        with pytest.raises(ShapeError):
            mlp_forward(init_mlp([4, 2], rng), np.ones((2, 5)))

    def test_deterministic_init(self):
        a = init_mlp([6, 8, 2], np.random.default_rng(7))
        b = init_mlp([6, 8, 2], np.random.default_rng(7))
        assert a.allclose(b)

    @pytest.mark.parametrize("activation", ["identity", "sigmoid"])
    def test_gradients(self, activation, fd, rel_err):
        rng = np.random.default_rng(11)
        model = init_mlp([5, 6, 4, 3], rng, output_activation=activation)
        X = rng.normal(size=(7, 5))
        R = rng.normal(size=(7, 3))

        def loss():
            return float(np.sum(mlp_forward(model, X)[0] * R))

        out, cache = mlp_forward(model, X)
        grads, d_input = mlp_backward(model, cache, R)
        numeric = fd(loss, model.weights + model.biases)
        assert rel_err(grads.weights + grads.biases, numeric) < 1e-4
        assert rel_err([d_input], fd(loss, [X])) < 1e-4

    def test_stale_cache(self, rng):
        model = init_mlp([3, 2], rng)
        out, cache = mlp_forward(model, np.ones((1, 3)))
        grads, _ = mlp_backward(model, cache, np.ones_like(out))
        adam_step(model, grads, init_adam(model, 1e-3))
        with pytest.raises(StaleCacheError):
            mlp_backward(model, cache, np.ones_like(out))


class TestAdam:
    def test_first_step_moves_by_lr(self, rng):
        model = init_mlp([4, 3], rng)
        before = model.copy()
        out, cache = mlp_forward(model, rng.normal(size=(5, 4)))
        grads, _ = mlp_backward(model, cache, rng.normal(size=out.shape))
        state = init_adam(model, 0.01)
        adam_step(model, grads, state)
        assert state.step == 1
        step = np.abs(model.weights[0] - before.weights[0])
        np.testing.assert_allclose(step, 0.01, rtol=1e-5)

    def test_rejects_non_positive_lr(self, rng):
        with pytest.raises(DataError):
            init_adam(init_mlp([2, 2], rng), 0.0)


class TestCheckpoint:
    def test_dict_round_trip_is_bit_exact(self, rng):
        model = init_mlp([6, 5, 2], rng, output_activation="sigmoid")
        restored = model_from_dict(model_to_dict(model, "encoder"), "encoder")
        assert restored.allclose(model, atol=0.0)
        assert restored.output_activation == "sigmoid"

    def test_file_round_trip(self, rng, tmp_path):
        model = init_mlp([6, 5, 2], rng)
        save_model(tmp_path / "m.json", model, kind="encoder")
        assert load_model(tmp_path / "m.json", expected_kind="encoder").allclose(model, atol=0.0)

    def test_wrong_kind(self, rng, tmp_path):
        save_model(tmp_path / "m.json", init_mlp([2, 2], rng), kind="fusion")
        with pytest.raises(DataError):
            load_model(tmp_path / "m.json", expected_kind="encoder")
