"""Tests for model_core: forward passes, loss, gradients, optimizer, projection, training, model files."""

import math

import numpy as np
import pytest

from data_pipeline import BinaryDataset
from errors import ConfigError, NumericError, ParseError, ShapeError, UsageError
from model_core import (DenseLayer, MlpBaselineModel, Mode, ModelKind, OptimizerState,
                        QuantumShallowModel, TrainConfig, as_batch, bce_loss, derive_rng,
                        derive_seed, forward_mlp, forward_quantum, gradient_mlp,
                        gradient_quantum, init_model, load_model, mean_bce,
                        project_constraints, save_model, sgd_step, train_binary)
from multiclass import BinaryTask


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def random_quantum(rng, M=3, N=4, relaxed=False):
    return QuantumShallowModel(rng.normal(size=(M, N)) * 0.7, rng.uniform(0.1, 1.0, size=M),
                               float(rng.normal()), relaxed)


def numeric_gradient(loss, params, step=1e-5):
    grads = {}
    for name, value in params.items():
        grad = np.zeros_like(value)
        for index in np.ndindex(value.shape):
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[name][index] += step
            minus[name][index] -= step
            grad[index] = (loss(plus) - loss(minus)) / (2 * step)
        grads[name] = grad
    return grads


class TestForwardQuantum:

    def test_unit_self_overlap(self):
        x = np.array([0.6, 0.8])
        model = QuantumShallowModel(x[None, :].copy(), np.array([1.0]), 0.0)
        assert forward_quantum(model, x) == pytest.approx(0.731059, abs=1e-6)

    def test_orthogonal_input_scores_half(self):
        model = QuantumShallowModel(np.array([[0.8, -0.6]]), np.array([1.0]), 0.0)
        assert forward_quantum(model, np.array([0.6, 0.8])) == pytest.approx(0.5, abs=1e-12)

    def test_two_neuron_closed_form(self):
        model = QuantumShallowModel(np.eye(2), np.array([0.25, 0.75]), -0.5)
        expected = sigmoid(0.25 * 0.36 + 0.75 * 0.64 - 0.5)
        assert forward_quantum(model, np.array([0.6, 0.8])) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(sigmoid(0.07), rel=1e-12)

    def test_batch_matches_rows(self):
        rng = np.random.default_rng(0)
        model = random_quantum(rng)
        X = rng.normal(size=(5, 4))
        rows = [forward_quantum(model, x) for x in X]
        np.testing.assert_allclose(forward_quantum(model, X), rows, rtol=1e-12)

    def test_dimension_mismatch_names_lengths(self):
        model = QuantumShallowModel(np.eye(2), np.array([0.5, 0.5]), 0.0)
        with pytest.raises(ShapeError) as excinfo:
            forward_quantum(model, np.ones(3))
        assert excinfo.value.expected == 2
        assert excinfo.value.actual == 3

    def test_score_strictly_inside_unit_interval(self):
        model = QuantumShallowModel(np.eye(3), np.ones(3) / 3, 0.0)
        huge = forward_quantum(model, np.array([1e6, 0.0, 0.0]))
        model_low = QuantumShallowModel(np.eye(3), np.ones(3) / 3, -1e6)
        tiny = forward_quantum(model_low, np.array([1.0, 0.0, 0.0]))
        assert 0.0 < tiny < 0.5 < huge < 1.0

    def test_relaxed_weights_scale_the_normalized_mixture(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            model = project_constraints(random_quantum(rng, relaxed=True))
            x = rng.normal(size=4)
            c = model.output_weights.sum()
            mixture = ((model.hidden_weights @ x) ** 2) @ (model.output_weights / c)
            assert forward_quantum(model, x) == pytest.approx(sigmoid(c * mixture + model.bias), rel=1e-10)


def identity_layer(weights, bias):
    width = weights.shape[0]
    return DenseLayer(weights, bias, np.zeros(width), np.ones(width), np.ones(width), np.zeros(width))


class TestForwardMlp:

    def test_zero_network_scores_half(self):
        layers = [identity_layer(np.zeros((3, 4)), np.zeros(3)) for _ in range(1)]
        layers.append(identity_layer(np.zeros((3, 3)), np.zeros(3)))
        model = MlpBaselineModel(layers, np.zeros(3), 0.0, dropout_rate=0.0)
        assert forward_mlp(model, np.ones(4)) == pytest.approx(0.5)

    def test_relu_kills_negative_preactivations(self):
        model = MlpBaselineModel([identity_layer(-np.ones((2, 3)), np.zeros(2))],
                                 np.array([5.0, -7.0]), 0.3, dropout_rate=0.0)
        assert forward_mlp(model, np.array([1.0, 2.0, 0.5])) == pytest.approx(sigmoid(0.3))

    def test_matches_hand_unrolled_eval_pass(self):
        rng = np.random.default_rng(11)
        model = init_model(rng, 4, 3, ModelKind.CLASSICAL, depth=2, dropout_rate=0.2)
        for layer in model.layers:
            layer.running_mean = rng.normal(size=4)
            layer.running_var = rng.uniform(0.5, 2.0, size=4)
            layer.scale = rng.uniform(0.5, 1.5, size=4)
            layer.shift = rng.normal(size=4) * 0.1
        x = rng.normal(size=3)
        a = x
        for layer in model.layers:
            h = layer.weights @ a + layer.bias
            normed = layer.scale * (h - layer.running_mean) / np.sqrt(layer.running_var) + layer.shift
            a = np.maximum(normed, 0.0)
        expected = sigmoid(float(a @ model.head_weights + model.head_bias))
        assert forward_mlp(model, x, Mode.EVAL) == pytest.approx(expected, rel=1e-12)

    def test_eval_is_deterministic_and_train_updates_statistics(self):
        rng = np.random.default_rng(2)
        model = init_model(rng, 5, 4, ModelKind.CLASSICAL, depth=2, dropout_rate=0.3)
        X = rng.normal(size=(8, 4))
        np.testing.assert_array_equal(forward_mlp(model, X), forward_mlp(model, X))
        before = model.layers[0].running_mean.copy()
        forward_mlp(model, X, Mode.TRAIN, rng=np.random.default_rng(0))
        assert not np.allclose(before, model.layers[0].running_mean)

    def test_train_mode_with_dropout_needs_rng(self):
        model = init_model(np.random.default_rng(0), 3, 2, ModelKind.CLASSICAL, dropout_rate=0.5)
        with pytest.raises(UsageError):
            forward_mlp(model, np.ones((4, 2)), Mode.TRAIN)


class TestBceLoss:

    def test_values(self):
        assert bce_loss(0.5, 1) == pytest.approx(math.log(2), abs=1e-4)
        assert bce_loss(0.9, 0) == pytest.approx(2.3026, abs=1e-4)

    def test_perfect_prediction_limit(self):
        assert bce_loss(1.0 - 1e-15, 1) < 1e-11
        assert bce_loss(0.0, 0) < 1e-11

    def test_clamped_at_extremes(self):
        assert math.isfinite(bce_loss(0.0, 1))
        assert bce_loss(0.0, 1) == pytest.approx(-math.log(1e-12))


class TestGradientQuantum:

    def test_matches_finite_differences_on_random_instances(self):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            model = random_quantum(rng, M=int(rng.integers(1, 4)), N=int(rng.integers(1, 5)))
            x = rng.normal(size=model.N)
            y = float(rng.integers(0, 2))
            X, labels = as_batch([(x, y)])

            def loss(params):
                return mean_bce(forward_quantum(model.with_parameters(params), X), labels)

            analytic = gradient_quantum(model, X, labels)
            numeric = numeric_gradient(loss, model.parameters())
            for name in analytic:
                np.testing.assert_allclose(analytic[name], numeric[name], rtol=1e-4, atol=1e-8,
                                           err_msg=name)

    def test_duplicate_samples_match_single(self):
        rng = np.random.default_rng(1)
        model = random_quantum(rng)
        x = rng.normal(size=4)
        single = gradient_quantum(model, x[None, :], [1.0])
        double = gradient_quantum(model, np.stack([x, x]), [1.0, 1.0])
        for name in single:
            np.testing.assert_allclose(single[name], double[name], rtol=1e-12)

    def test_vanishes_at_perfect_fit(self):
        model = QuantumShallowModel(np.eye(2), np.array([0.5, 0.5]), 30.0)
        grads = gradient_quantum(model, np.array([[0.6, 0.8]]), [1.0])
        assert max(np.abs(g).max() for g in grads.values()) < 1e-10

    def test_empty_batch_is_usage_error(self):
        model = QuantumShallowModel(np.eye(2), np.array([0.5, 0.5]), 0.0)
        with pytest.raises(UsageError):
            gradient_quantum(model, np.zeros((0, 2)), [])
        with pytest.raises(UsageError):
            as_batch([])


class TestGradientMlp:

    def test_matches_finite_differences_without_dropout(self):
        rng = np.random.default_rng(7)
        model = init_model(rng, 4, 3, ModelKind.CLASSICAL, depth=2, dropout_rate=0.0)
        X = rng.normal(size=(8, 3))
        y = rng.integers(0, 2, size=8).astype(float)

        def loss(params):
            perturbed = model.with_parameters(params)
            return mean_bce(forward_mlp(perturbed, X, Mode.TRAIN), y)

        numeric = numeric_gradient(loss, model.parameters(), step=1e-6)
        analytic = gradient_mlp(model, X, y)
        for name in analytic:
            np.testing.assert_allclose(analytic[name], numeric[name], rtol=1e-4, atol=1e-6,
                                       err_msg=name)


class TestSgdStep:

    def test_zero_gradient_leaves_params(self):
        params = {"w": np.array([1.0, -2.0])}
        state = OptimizerState.for_params(params, 0.05, 0.09, 0.0)
        new_params, _ = sgd_step(params, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(new_params["w"], params["w"])

    def test_single_step_by_hand(self):
        params = {"w": np.array([1.0])}
        state = OptimizerState.for_params(params, 0.05, 0.09, 1e-4)
        new_params, state = sgd_step(params, {"w": np.array([0.2])}, state)
        assert state.velocity["w"][0] == pytest.approx(0.2001, abs=1e-12)
        assert new_params["w"][0] == pytest.approx(0.989995, abs=1e-12)

    def test_two_steps_follow_momentum_recursion(self):
        lr, momentum, decay, grad = 0.05, 0.09, 1e-4, 0.2
        params = {"w": np.array([1.0])}
        state = OptimizerState.for_params(params, lr, momentum, decay)
        for _ in range(2):
            params, state = sgd_step(params, {"w": np.array([grad])}, state)
        v1 = grad + decay * 1.0
        p1 = 1.0 - lr * v1
        v2 = momentum * v1 + grad + decay * p1
        assert state.velocity["w"][0] == pytest.approx(v2, rel=1e-12)
        assert params["w"][0] == pytest.approx(p1 - lr * v2, rel=1e-12)

    def test_bias_is_not_decayed(self):
        params = {"bias": np.array([1.0])}
        state = OptimizerState.for_params(params, 0.05, 0.0, 0.5)
        new_params, _ = sgd_step(params, {"bias": np.array([0.0])}, state)
        assert new_params["bias"][0] == 1.0

    def test_shape_mismatch(self):
        params = {"w": np.ones(3)}
        state = OptimizerState.for_params(params)
        with pytest.raises(ShapeError):
            sgd_step(params, {"w": np.ones(2)}, state)

    def test_invalid_hyperparameters(self):
        with pytest.raises(UsageError):
            OptimizerState.for_params({"w": np.ones(1)}, learning_rate=0.0)
        with pytest.raises(UsageError):
            OptimizerState.for_params({"w": np.ones(1)}, momentum=1.0)


class TestProjectConstraints:

    def test_row_scaling(self):
        model = QuantumShallowModel(np.array([[3.0, 4.0]]), np.array([1.0]), 0.0)
        np.testing.assert_allclose(project_constraints(model).hidden_weights, [[0.6, 0.8]])

    def test_clamp_then_normalize_output(self):
        model = QuantumShallowModel(np.eye(3), np.array([-1.0, 2.0, 2.0]), 0.0)
        np.testing.assert_allclose(project_constraints(model).output_weights, [0.0, 0.5, 0.5])

    def test_relaxed_keeps_magnitude(self):
        model = QuantumShallowModel(np.eye(3), np.array([-1.0, 2.0, 2.0]), 0.0, relaxed_l1=True)
        np.testing.assert_allclose(project_constraints(model).output_weights, [0.0, 2.0, 2.0])

    def test_relaxed_mixture_is_uncapped_multiple_of_normalized(self):
        rng = np.random.default_rng(5)
        hidden = rng.normal(size=(4, 6))
        relaxed = project_constraints(QuantumShallowModel(hidden, np.full(4, 5.0), 0.0, relaxed_l1=True))
        c = relaxed.output_weights.sum()
        assert c == pytest.approx(20.0)
        assert c > np.sqrt(4)
        strict = QuantumShallowModel(relaxed.hidden_weights, relaxed.output_weights / c, 0.0)
        x = rng.normal(size=6)
        x /= np.linalg.norm(x)
        overlap = (relaxed.hidden_weights @ x) ** 2
        assert relaxed.output_weights @ overlap == pytest.approx(c * (strict.output_weights @ overlap))

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        for relaxed in (False, True):
            once = project_constraints(random_quantum(rng, relaxed=relaxed))
            twice = project_constraints(once)
            np.testing.assert_allclose(once.hidden_weights, twice.hidden_weights, atol=1e-15)
            np.testing.assert_allclose(once.output_weights, twice.output_weights, atol=1e-15)

    def test_all_negative_output_resets_to_uniform(self):
        model = QuantumShallowModel(np.eye(4), -np.ones(4), 0.0)
        np.testing.assert_allclose(project_constraints(model).output_weights, np.full(4, 0.25))

    def test_degenerate_row_is_rerandomized(self):
        hidden = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 2.0]])
        model = project_constraints(QuantumShallowModel(hidden, np.array([0.5, 0.5]), 0.0),
                                    np.random.default_rng(0))
        np.testing.assert_allclose(np.linalg.norm(model.hidden_weights, axis=1), 1.0, atol=1e-12)
        assert model.invariant_violations() == []


class TestInitModel:

    def test_fixed_seed_is_bit_identical(self):
        for kind in ModelKind:
            a = init_model(derive_rng(9, "t"), 5, 7, kind)
            b = init_model(derive_rng(9, "t"), 5, 7, kind)
            for name, value in a.parameters().items():
                np.testing.assert_array_equal(value, b.parameters()[name])

    def test_quantum_init_is_feasible(self):
        model = init_model(np.random.default_rng(0), 20, 16, ModelKind.QUANTUM)
        assert model.invariant_violations() == []
        np.testing.assert_allclose(model.output_weights, np.full(20, 1 / 20))
        assert model.bias == 0.0

    def test_scalar_model(self):
        model = init_model(np.random.default_rng(4), 1, 1, "quantum")
        assert abs(model.hidden_weights[0, 0]) == pytest.approx(1.0)
        assert model.output_weights[0] == 1.0

    def test_classical_init_uses_identity_statistics(self):
        model = init_model(np.random.default_rng(0), 6, 4, ModelKind.CLASSICAL, depth=3)
        assert model.depth == 3
        for layer in model.layers:
            np.testing.assert_array_equal(layer.running_var, np.ones(6))
            np.testing.assert_array_equal(layer.bias, np.zeros(6))

    def test_rejects_empty_dimensions(self):
        with pytest.raises(UsageError):
            init_model(np.random.default_rng(0), 0, 3, ModelKind.QUANTUM)

    def test_derived_seeds_differ_per_token(self):
        assert derive_seed(0, "ovo-0-1") != derive_seed(0, "ovo-0-2")
        assert derive_seed(0, "ovo-0-1") == derive_seed(0, "ovo-0-1")
        assert 0 <= derive_seed(123, "x", 4) < 2 ** 64


def blobs(n=200, seed=0):
    rng = np.random.default_rng(seed)
    zeros = rng.normal([3.0, 0.0], 0.5, size=(n, 2))
    ones = rng.normal([0.0, 3.0], 0.5, size=(n, 2))
    X = np.vstack([zeros, ones])
    y = np.concatenate([np.zeros(n), np.ones(n)])
    return BinaryDataset(X, y, y.astype(np.int64), "blobs")


class TestTrainBinary:

    def test_separates_gaussian_blobs(self):
        data = blobs()
        config = TrainConfig(batch_size=16, epochs=20, seed=1, M=4)
        model, history = train_binary(data, data, None, config)
        assert history.epochs[-1].train_accuracy >= 0.95
        assert len(history.epochs) == 20

    def test_strict_constraints_hold_after_training(self):
        data = blobs(60)
        config = TrainConfig(batch_size=16, epochs=5, seed=2, M=6, relaxed_l1=False)
        model, _ = train_binary(data, data, None, config)
        assert model.invariant_violations(tol=1e-6) == []
        assert model.output_weights.sum() == pytest.approx(1.0, abs=1e-6)

    def test_constant_labels_drive_scores_down(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(64, 3))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        data = BinaryDataset(X, np.zeros(64), np.zeros(64, dtype=np.int64))
        model, history = train_binary(data, data, None, TrainConfig(batch_size=16, epochs=30, M=3))
        assert np.all(model.score(X) < 0.5)
        assert history.losses()[-1] < history.losses()[0]

    def test_same_seed_same_history(self):
        data = blobs(50)
        config = TrainConfig(batch_size=8, epochs=3, seed=5, M=3)
        first_model, first = train_binary(data, data, None, config)
        second_model, second = train_binary(data, data, None, config)
        assert first.to_dict() == second.to_dict()
        np.testing.assert_array_equal(first_model.hidden_weights, second_model.hidden_weights)

    def test_classical_baseline_trains(self):
        data = blobs(80)
        config = TrainConfig(batch_size=16, epochs=10, seed=0, kind=ModelKind.CLASSICAL, M=8)
        model, history = train_binary(data, data, None, config)
        assert isinstance(model, MlpBaselineModel)
        assert history.epochs[-1].train_accuracy >= 0.9

    def test_empty_class_is_named(self):
        data = blobs(20)
        task = BinaryTask("ovr-2", frozenset([0]), frozenset([1, 2]))
        with pytest.raises(UsageError, match="class 2"):
            train_binary(data, data, task, TrainConfig(batch_size=8, epochs=1, M=2))

    def test_batch_larger_than_training_set(self):
        data = blobs(5)
        with pytest.raises(UsageError):
            train_binary(data, data, None, TrainConfig(batch_size=64, epochs=1, M=2))

    def test_non_finite_loss_is_numeric_error(self):
        data = blobs(10)
        data.features[0, 0] = np.nan
        with pytest.raises(NumericError, match="blobs"):
            train_binary(data, data, None, TrainConfig(batch_size=4, epochs=1, M=2))


class TestModelFiles:

    def test_quantum_round_trip(self, tmp_path):
        model = init_model(np.random.default_rng(0), 4, 6, ModelKind.QUANTUM, relaxed_l1=True)
        loaded = load_model(save_model(model, tmp_path / "q.model"))
        assert isinstance(loaded, QuantumShallowModel) and loaded.relaxed_l1
        np.testing.assert_array_equal(loaded.hidden_weights, model.hidden_weights)
        np.testing.assert_array_equal(loaded.output_weights, model.output_weights)

    def test_classical_round_trip_scores_identically(self, tmp_path):
        model = init_model(np.random.default_rng(1), 5, 3, ModelKind.CLASSICAL, depth=2, dropout_rate=0.25)
        loaded = load_model(save_model(model, tmp_path / "c.model"))
        X = np.random.default_rng(2).normal(size=(4, 3))
        np.testing.assert_array_equal(loaded.score(X), model.score(X))
        assert loaded.dropout_rate == 0.25

    def test_header_and_payload_checks(self, tmp_path):
        path = save_model(QuantumShallowModel(np.eye(2), np.array([0.5, 0.5]), 0.0), tmp_path / "m.model")
        raw = path.read_bytes()
        (tmp_path / "bad.model").write_bytes(b"NOT-A-MODEL\n" + raw)
        with pytest.raises(ParseError):
            load_model(tmp_path / "bad.model")
        (tmp_path / "short.model").write_bytes(raw[:-8])
        with pytest.raises(ParseError, match="payload"):
            load_model(tmp_path / "short.model")

    def test_infeasible_model_is_rejected(self, tmp_path):
        path = save_model(QuantumShallowModel(np.array([[3.0, 4.0]]), np.array([1.0]), 0.0),
                          tmp_path / "raw.model")
        with pytest.raises(ParseError, match="constraint"):
            load_model(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_model(tmp_path / "absent.model")
