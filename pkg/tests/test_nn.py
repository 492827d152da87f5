"""Classifier core: forward trace, analytic gradients, SGD, serialization."""

import numpy as np
import pytest

from fedbalance import nn
from fedbalance.errors import ConfigError, NumericError


def small_model(seed=0, input_dim=6, hidden=(5, 4), classes=3, activation="relu"):
    return nn.init_model(
        nn.ModelSpec(input_dim, list(hidden), classes, activation), seed
    )


def rand_input(model, n=1, seed=0):
    x = np.random.default_rng(seed).uniform(0, 1, size=(n, model.input_dim))
    return x[0] if n == 1 else x


def ce_loss_value(model, x, label):
    return -np.log(nn.forward(model, x).probs[0, label])


class TestForward:
    def test_zero_weight_model_gives_uniform_probs(self):
        layers = [
            nn.DenseLayer(np.zeros((4, 6)), np.zeros(4), "relu"),
            nn.DenseLayer(np.zeros((3, 4)), np.zeros(3), "identity"),
        ]
        model = nn.MlpModel(layers)
        trace = nn.forward(model, np.ones(6))
        np.testing.assert_allclose(trace.probs[0], np.full(3, 1 / 3), atol=1e-15)

    def test_hand_evaluated_two_layer_example(self):
        # one ReLU unit feeding two output nodes; all values chosen so the
        # whole forward pass can be checked by hand
        w1 = np.array([[1.0, -2.0]])
        b1 = np.array([0.5])
        w2 = np.array([[2.0], [-1.0]])
        b2 = np.array([0.1, -0.2])
        model = nn.MlpModel(
            [nn.DenseLayer(w1, b1, "relu"), nn.DenseLayer(w2, b2, "identity")]
        )
        x = np.array([2.0, 0.5])
        # hidden: relu(1*2 - 2*0.5 + 0.5) = 1.5; logits: (3.1, -1.7)
        z = np.array([2.0 * 1.5 + 0.1, -1.0 * 1.5 - 0.2])
        expected = np.exp(z - z.max())
        expected /= expected.sum()
        trace = nn.forward(model, x)
        np.testing.assert_allclose(trace.hl_output[0], [1.5], atol=1e-15)
        np.testing.assert_allclose(trace.logits[0], z, atol=1e-15)
        np.testing.assert_allclose(trace.probs[0], expected, rtol=1e-12)

    def test_probs_sum_to_one(self):
        model = small_model()
        rng = np.random.default_rng(1)
        for _ in range(20):
            trace = nn.forward(model, rng.normal(size=(7, model.input_dim)))
            np.testing.assert_allclose(trace.probs.sum(axis=1), 1.0, atol=1e-9)
            assert (trace.probs > 0).all() and (trace.probs < 1).all()
            assert (trace.hl_output >= 0).all()

    def test_dimension_mismatch_rejected(self):
        model = small_model()
        with pytest.raises(ValueError, match="expected"):
            nn.forward(model, np.ones(model.input_dim + 1))


class TestLastLayerGradient:
    def test_one_hot_probs_zero_true_row(self):
        model = small_model()
        trace = nn.forward(model, rand_input(model))
        p = 1
        trace.probs[:] = 0.0
        trace.probs[0, p] = 1.0
        grad = nn.last_layer_gradient(trace, p)
        np.testing.assert_allclose(grad, 0.0, atol=1e-15)

    def test_two_class_substitution(self):
        # probs (0.5, 0.5), hidden output (2.0), true class 0:
        # rows are (f - onehot) * y = (-0.5*2, 0.5*2)
        trace = nn.ForwardTrace(
            layer_inputs=[np.array([[2.0]])],
            pre_activations=[np.array([[0.0, 0.0]])],
            probs=np.array([[0.5, 0.5]]),
        )
        grad = nn.last_layer_gradient(trace, 0)
        np.testing.assert_allclose(grad, [[-1.0], [1.0]], atol=1e-15)

    def test_matches_backward_last_layer_block(self):
        rng = np.random.default_rng(7)
        for trial in range(10):
            model = small_model(seed=trial)
            x = rng.uniform(size=(5, model.input_dim))
            trace = nn.forward(model, x)
            label = int(rng.integers(model.class_count))
            grad_logits = trace.probs.copy()
            grad_logits[:, label] -= 1.0
            full = nn.backward(model, trace, grad_logits)
            analytic = nn.last_layer_gradient(trace, label)
            np.testing.assert_allclose(full.weight_grads[-1], analytic, atol=1e-12)

    def test_class_out_of_range(self):
        model = small_model()
        trace = nn.forward(model, rand_input(model))
        with pytest.raises(IndexError):
            nn.last_layer_gradient(trace, model.class_count)


class TestSameHiddenOutputSameGradient:
    def test_identical_hidden_outputs_give_identical_gradients(self):
        # zeroing an input column makes that coordinate invisible, so two
        # inputs differing only there are forced onto the same hidden output
        rng = np.random.default_rng(42)
        for trial in range(25):
            model = small_model(seed=trial, activation="relu" if trial % 2 else "sigmoid")
            dead = int(rng.integers(model.input_dim))
            model.layers[0].weights[:, dead] = 0.0
            x1 = rng.uniform(size=model.input_dim)
            x2 = x1.copy()
            x2[dead] += rng.uniform(0.5, 2.0)
            t1, t2 = nn.forward(model, x1), nn.forward(model, x2)
            np.testing.assert_array_equal(t1.hl_output, t2.hl_output)
            label = int(rng.integers(model.class_count))
            g1 = nn.last_layer_gradient(t1, label)
            g2 = nn.last_layer_gradient(t2, label)
            np.testing.assert_allclose(g1, g2, atol=1e-12)


class TestBackward:
    def test_matches_central_finite_differences(self):
        step = 1e-5
        for trial in range(3):
            model = small_model(seed=trial + 10)
            x = rand_input(model, seed=trial)
            label = trial % model.class_count
            trace = nn.forward(model, x)
            grad_logits = trace.probs.copy()
            grad_logits[0, label] -= 1.0
            grads = nn.backward(model, trace, grad_logits)
            for li, layer in enumerate(model.layers):
                for arr, grad in (
                    (layer.weights, grads.weight_grads[li]),
                    (layer.bias, grads.bias_grads[li]),
                ):
                    it = np.nditer(arr, flags=["multi_index"])
                    for _ in it:
                        idx = it.multi_index
                        orig = arr[idx]
                        arr[idx] = orig + step
                        up = ce_loss_value(model, x, label)
                        arr[idx] = orig - step
                        down = ce_loss_value(model, x, label)
                        arr[idx] = orig
                        fd = (up - down) / (2 * step)
                        rel = abs(grad[idx] - fd) / max(abs(fd), 1e-8)
                        assert rel < 1e-4, f"layer {li} {idx}: {grad[idx]} vs {fd}"

    def test_zero_loss_gradient_gives_zero_grads(self):
        model = small_model()
        trace = nn.forward(model, rand_input(model, n=3))
        grads = nn.backward(model, trace, np.zeros((3, model.class_count)))
        for dw, db in zip(grads.weight_grads, grads.bias_grads):
            np.testing.assert_array_equal(dw, 0.0)
            np.testing.assert_array_equal(db, 0.0)

    def test_duplicate_sample_batch_equals_single(self):
        model = small_model()
        x = rand_input(model)
        single = nn.forward(model, x)
        double = nn.forward(model, np.stack([x, x]))
        gl_single = single.probs - np.eye(3)[[1]]
        gl_double = double.probs - np.eye(3)[[1, 1]]
        g1 = nn.backward(model, single, gl_single)
        g2 = nn.backward(model, double, gl_double)
        for a, b in zip(g1.weight_grads, g2.weight_grads):
            np.testing.assert_allclose(a, b, atol=1e-15)

    def test_batch_gradient_is_mean_of_per_sample(self):
        model = small_model(seed=5)
        rng = np.random.default_rng(5)
        xs = rng.uniform(size=(6, model.input_dim))
        labels = rng.integers(0, model.class_count, size=6)
        batch_trace = nn.forward(model, xs)
        gl = batch_trace.probs - np.eye(model.class_count)[labels]
        batch = nn.backward(model, batch_trace, gl)
        sums = [np.zeros_like(w) for w in batch.weight_grads]
        for i in range(6):
            t = nn.forward(model, xs[i])
            g = nn.backward(model, t, t.probs - np.eye(model.class_count)[[labels[i]]])
            for acc, w in zip(sums, g.weight_grads):
                acc += w / 6
        for a, b in zip(batch.weight_grads, sums):
            np.testing.assert_allclose(a, b, atol=1e-10)

    def test_foreign_trace_rejected(self):
        model = small_model()
        other = small_model(input_dim=7)
        trace = nn.forward(other, np.ones(7))
        with pytest.raises(ValueError):
            nn.backward(model, trace, np.zeros((1, model.class_count)))


class TestSgdStep:
    def test_zero_learning_rate_keeps_model(self):
        model = small_model()
        trace = nn.forward(model, rand_input(model))
        grads = nn.backward(model, trace, trace.probs - np.eye(3)[[0]])
        stepped = nn.sgd_step(model, grads, 0.0)
        for a, b in zip(nn.parameters(model), nn.parameters(stepped)):
            np.testing.assert_array_equal(a, b)

    def test_scalar_arithmetic(self):
        model = nn.MlpModel(
            [
                nn.DenseLayer(np.array([[1.0], [0.0]]), np.zeros(2), "identity"),
            ]
        )
        grads = nn.GradientSet(
            [np.array([[2.0], [0.0]])], [np.zeros(2)], batch_size=1
        )
        stepped = nn.sgd_step(model, grads, 0.5)
        assert stepped.layers[0].weights[0, 0] == 0.0

    def test_two_steps_are_additive(self):
        model = small_model()
        trace = nn.forward(model, rand_input(model))
        grads = nn.backward(model, trace, trace.probs - np.eye(3)[[2]])
        twice = nn.sgd_step(nn.sgd_step(model, grads, 0.1), grads, 0.1)
        for li in range(len(model.layers)):
            np.testing.assert_allclose(
                twice.layers[li].weights,
                model.layers[li].weights - 0.2 * grads.weight_grads[li],
                atol=1e-15,
            )

    def test_non_finite_gradient_rejected(self):
        model = small_model()
        grads = nn.GradientSet(
            [np.full_like(l.weights, np.nan) for l in model.layers],
            [np.zeros_like(l.bias) for l in model.layers],
            batch_size=1,
        )
        with pytest.raises(NumericError):
            nn.sgd_step(model, grads, 0.1)


class TestInitModel:
    def test_same_seed_bit_identical(self):
        a = small_model(seed=9)
        b = small_model(seed=9)
        for pa, pb in zip(nn.parameters(a), nn.parameters(b)):
            np.testing.assert_array_equal(pa, pb)

    def test_different_seeds_differ(self):
        a = small_model(seed=1)
        b = small_model(seed=2)
        assert any(
            not np.array_equal(pa, pb)
            for pa, pb in zip(nn.parameters(a), nn.parameters(b))
        )

    def test_single_class_rejected(self):
        with pytest.raises(ConfigError):
            nn.init_model(nn.ModelSpec(4, [3], 1), 0)

    def test_degenerate_width_rejected(self):
        with pytest.raises(ConfigError):
            nn.init_model(nn.ModelSpec(4, [0], 3), 0)

    def test_weight_scale_follows_fan_in_out(self):
        model = small_model(seed=3, input_dim=100, hidden=(50,), classes=10)
        w = model.layers[0].weights
        limit = np.sqrt(6 / 150)
        assert np.abs(w).max() <= limit
        assert np.abs(w).max() > 0.8 * limit


class TestSerialization:
    def test_binary_round_trip_bit_exact(self, tmp_path):
        model = small_model(seed=11, activation="sigmoid")
        path = tmp_path / "model.npz"
        nn.save_model(model, path)
        loaded = nn.load_model(path)
        assert [l.activation for l in loaded.layers] == [
            l.activation for l in model.layers
        ]
        for a, b in zip(nn.parameters(model), nn.parameters(loaded)):
            np.testing.assert_array_equal(a, b)
