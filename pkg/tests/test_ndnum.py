import json

import numpy as np
import pytest

from sdm_policy import sdm_errors as errors
from sdm_policy.ndnum import (
    AdamState,
    Layer,
    MlpNet,
    Rng,
    adam_step,
    load_checkpoint,
    make_mlp,
    mlp_backward,
    mlp_forward,
    rng_gaussian,
    save_checkpoint,
)

from .conftest import make_random_net, numeric_gradient, relative_error


def scalar_net(weight=0.0):
    return MlpNet([Layer([[weight]], [0.0], "identity")])


class TestMlpForward:
    @staticmethod
    def test_identity_layer():
        net = MlpNet([Layer(np.eye(2), np.zeros(2), "identity")])
        out, _ = mlp_forward(net, [[1.0, 2.0]])
        np.testing.assert_array_equal(out, [[1.0, 2.0]])

    @staticmethod
    def test_relu_layer():
        net = MlpNet([Layer(np.eye(2), np.zeros(2), "relu"), Layer(np.eye(2), np.zeros(2), "identity")])
        out, _ = mlp_forward(net, [[-1.0, 3.0]])
        np.testing.assert_array_equal(out, [[0.0, 3.0]])

    @staticmethod
    def test_two_layer_silu():
        net = MlpNet([Layer([[0.5]], [0.0], "silu"), Layer([[0.5]], [0.0], "identity")])
        out, cache = mlp_forward(net, [[1.0]])
        assert cache.pre_activations[0][0, 0] == 0.5
        assert out[0, 0] == pytest.approx(0.15561, abs=1e-5)

    @staticmethod
    def test_output_shape(rng):
        net = make_mlp([3, 7, 5], rng)
        out, cache = mlp_forward(net, np.ones((4, 3)))
        assert out.shape == (4, 5)
        assert len(cache.layer_inputs) == 2

    @staticmethod
    def test_dimension_mismatch_names_both_dims(rng):
        net = make_mlp([3, 4, 2], rng)
        with pytest.raises(errors.ShapeError) as e:
            mlp_forward(net, np.ones((2, 5)))
        assert "5" in str(e.value) and "3" in str(e.value)

    @staticmethod
    def test_input_must_be_2d(rng):
        net = make_mlp([3, 2], rng)
        with pytest.raises(errors.ShapeError):
            mlp_forward(net, np.ones(3))

    @staticmethod
    def test_non_finite_output():
        net = MlpNet([Layer([[np.inf]], [0.0], "identity")])
        with pytest.raises(errors.NumericError):
            mlp_forward(net, [[1.0]])


class TestMlpNet:
    @staticmethod
    def test_layers_must_chain():
        with pytest.raises(errors.ShapeError):
            MlpNet([Layer(np.ones((2, 3)), np.zeros(3), "silu"), Layer(np.ones((2, 1)), np.zeros(1), "identity")])

    @staticmethod
    def test_final_activation_is_identity():
        with pytest.raises(errors.ConfigError):
            MlpNet([Layer(np.ones((2, 3)), np.zeros(3), "relu")])

    @staticmethod
    def test_unknown_activation():
        with pytest.raises(errors.ConfigError):
            Layer(np.ones((2, 3)), np.zeros(3), "tanh")

    @staticmethod
    def test_make_mlp_init(rng):
        net = make_mlp([4, 16, 16, 2], rng)
        assert [layer.activation for layer in net.layers] == ["silu", "silu", "identity"]
        assert net.input_dim == 4 and net.output_dim == 2
        for layer in net.layers:
            bound = np.sqrt(6.0 / layer.weight.shape[0])
            assert np.all(np.abs(layer.weight) <= bound)
            assert np.all(layer.bias == 0.0)

    @staticmethod
    def test_copy_is_independent(rng):
        net = make_mlp([2, 4, 1], rng)
        clone = net.copy()
        assert clone.fingerprint() == net.fingerprint()
        clone.layers[0].weight[0, 0] += 1.0
        assert clone.fingerprint() != net.fingerprint()
        assert net.same_architecture(clone)


class TestMlpBackward:
    @staticmethod
    def test_identity_passes_gradient_through():
        net = MlpNet([Layer(np.eye(3), np.zeros(3), "identity")])
        _, cache = mlp_forward(net, np.arange(6.0).reshape(2, 3))
        grad_output = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]])
        _, grad_input = mlp_backward(net, cache, grad_output)
        np.testing.assert_array_equal(grad_input, grad_output)

    @staticmethod
    def test_zero_gradient(rng):
        net = make_random_net(rng, [3, 8, 2])
        _, cache = mlp_forward(net, rng.gaussian(5, 3))
        grads, grad_input = mlp_backward(net, cache, np.zeros((5, 2)))
        for grad, param in zip(grads, net.parameters()):
            assert grad.shape == param.shape
            assert not grad.any()
        assert not grad_input.any()

    @staticmethod
    @pytest.mark.parametrize("case", range(20))
    def test_matches_finite_differences(case):
        rng = Rng(100, case)
        depth = 1 + case % 3
        sizes = [int(size) for size in rng.integers(1, 16, depth + 1)]
        activation = "silu" if case % 2 == 0 else "relu"
        net = make_random_net(rng, sizes, activation)
        inputs = rng.gaussian(3, sizes[0])
        weights = rng.gaussian(3, sizes[-1])

        def loss():
            out, _ = mlp_forward(net, inputs)
            return float(np.sum(out * weights))

        _, cache = mlp_forward(net, inputs)
        grads, grad_input = mlp_backward(net, cache, weights)
        for grad, param in zip(grads, net.parameters()):
            assert relative_error(grad, numeric_gradient(loss, param)) <= 1e-5
        assert relative_error(grad_input, numeric_gradient(loss, inputs)) <= 1e-5

    @staticmethod
    def test_backward_is_linear(rng):
        net = make_random_net(rng, [4, 16, 16, 3])
        _, cache = mlp_forward(net, rng.gaussian(6, 4))
        g1, g2 = rng.gaussian(6, 3), rng.gaussian(6, 3)
        both, both_input = mlp_backward(net, cache, g1 + g2)
        first, first_input = mlp_backward(net, cache, g1)
        second, second_input = mlp_backward(net, cache, g2)
        for total, a, b in zip(both, first, second):
            np.testing.assert_allclose(total, a + b, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(both_input, first_input + second_input, rtol=1e-12, atol=1e-12)

    @staticmethod
    def test_stale_cache(rng):
        net = make_mlp([2, 4, 1], rng)
        _, cache = mlp_forward(net, np.ones((1, 2)))
        grads, _ = mlp_backward(net, cache, np.ones((1, 1)))
        adam_step(AdamState.for_net(net), net, grads)
        with pytest.raises(errors.CacheError):
            mlp_backward(net, cache, np.ones((1, 1)))

    @staticmethod
    def test_cache_from_another_net(rng):
        net = make_mlp([2, 4, 1], rng)
        _, cache = mlp_forward(net.copy(), np.ones((1, 2)))
        with pytest.raises(errors.CacheError):
            mlp_backward(net, cache, np.ones((1, 1)))

    @staticmethod
    def test_grad_output_shape(rng):
        net = make_mlp([2, 4, 1], rng)
        _, cache = mlp_forward(net, np.ones((3, 2)))
        with pytest.raises(errors.ShapeError):
            mlp_backward(net, cache, np.ones((2, 1)))


class TestAdamStep:
    @staticmethod
    def test_zero_gradients_leave_params_unchanged(rng):
        net = make_random_net(rng, [3, 5, 2])
        before = net.fingerprint()
        state = AdamState.for_net(net)
        adam_step(state, net, [np.zeros_like(p) for p in net.parameters()])
        assert net.fingerprint() == before
        assert state.step == 1

    @staticmethod
    def test_single_step_by_hand():
        net = scalar_net()
        state = AdamState.for_net(net, lr=1e-3)
        adam_step(state, net, [np.array([[1.0]]), np.array([0.0])])
        assert net.layers[0].weight[0, 0] == pytest.approx(-1e-3, rel=1e-6)
        assert net.layers[0].bias[0] == 0.0

    @staticmethod
    def test_constant_gradient_moves_monotonically():
        net = scalar_net()
        state = AdamState.for_net(net, lr=1e-3)
        trajectory = []
        for _ in range(2):
            adam_step(state, net, [np.array([[1.0]]), np.array([0.0])])
            trajectory.append(net.layers[0].weight[0, 0])
        assert 0.0 > trajectory[0] > trajectory[1]
        assert state.step == 2

    @staticmethod
    def test_moment_shapes_mirror_parameters(rng):
        net = make_mlp([3, 6, 2], rng)
        state = AdamState.for_net(net)
        assert [m.shape for m in state.first_moments] == [p.shape for p in net.parameters()]
        assert [v.shape for v in state.second_moments] == [p.shape for p in net.parameters()]

    @staticmethod
    def test_nan_gradient_aborts_and_names_tensor(rng):
        net = make_mlp([3, 6, 2], rng)
        before = net.fingerprint()
        state = AdamState.for_net(net)
        grads = [np.zeros_like(p) for p in net.parameters()]
        grads[2][0, 0] = np.nan
        with pytest.raises(errors.NumericError) as e:
            adam_step(state, net, grads)
        assert "layers[1].weight" in str(e.value)
        assert net.fingerprint() == before
        assert state.step == 0

    @staticmethod
    def test_gradient_count_mismatch(rng):
        net = make_mlp([3, 6, 2], rng)
        with pytest.raises(errors.ShapeError):
            adam_step(AdamState.for_net(net), net, [np.zeros((3, 6))])

    @staticmethod
    def test_bumps_version(rng):
        net = make_mlp([3, 2], rng)
        adam_step(AdamState.for_net(net), net, [np.zeros_like(p) for p in net.parameters()])
        assert net.version == 1


class TestRng:
    @staticmethod
    def test_same_seed_same_stream():
        first, second = Rng(7), Rng(7)
        for rows, cols in [(3, 2), (1, 5), (4, 4)]:
            np.testing.assert_array_equal(rng_gaussian(first, rows, cols), rng_gaussian(second, rows, cols))

    @staticmethod
    def test_different_seeds_differ():
        assert not np.array_equal(rng_gaussian(Rng(7), 2, 2), rng_gaussian(Rng(8), 2, 2))

    @staticmethod
    def test_moments():
        draws = rng_gaussian(Rng(42), 100_000, 1)
        assert abs(draws.mean()) <= 0.0095
        assert 0.97 <= draws.var() <= 1.03

    @staticmethod
    def test_spawn_is_positional():
        parent = Rng(5)
        parent.gaussian(10, 1)
        np.testing.assert_array_equal(parent.spawn(3).gaussian(2, 2), Rng(5, 3).gaussian(2, 2))
        assert not np.array_equal(Rng(5, 3).gaussian(2, 2), Rng(5, 4).gaussian(2, 2))

    @staticmethod
    @pytest.mark.parametrize("rows, cols", [(0, 2), (2, 0)])
    def test_rejects_empty_shapes(rows, cols):
        with pytest.raises(errors.ShapeError):
            rng_gaussian(Rng(1), rows, cols)

    @staticmethod
    def test_integers_are_inclusive():
        draws = Rng(3).integers(1, 3, 1000)
        assert set(draws.tolist()) == {1, 2, 3}

    @staticmethod
    @pytest.mark.parametrize("seed, keys", [(-1, ()), (4, (2, -3))])
    def test_rejects_negative_seeds(seed, keys):
        with pytest.raises(errors.ConfigError):
            Rng(seed, *keys)


class TestDeterminism:
    @staticmethod
    def test_training_trajectories_are_bit_identical():
        def run():
            rng = Rng(11)
            net = make_random_net(rng, [3, 8, 8, 2])
            state = AdamState.for_net(net, lr=1e-2)
            inputs, targets = rng.gaussian(16, 3), rng.gaussian(16, 2)
            for _ in range(5):
                out, cache = mlp_forward(net, inputs)
                grads, _ = mlp_backward(net, cache, 2.0 * (out - targets) / out.size)
                adam_step(state, net, grads)
            return net.fingerprint()

        assert run() == run()


class TestCheckpoint:
    @staticmethod
    def test_f64_round_trip_is_exact(rng, tmp_path):
        net = make_random_net(rng, [3, 5, 2])
        path = tmp_path / "net.json"
        save_checkpoint(path, net, {"role": "teacher"}, dtype="f64")
        loaded, meta = load_checkpoint(path)
        assert loaded.fingerprint() == net.fingerprint()
        assert meta == {"role": "teacher"}

    @staticmethod
    def test_f32_rounds_parameters(rng, tmp_path):
        net = make_random_net(rng, [3, 5, 2])
        path = tmp_path / "net.json"
        save_checkpoint(path, net)
        loaded, _ = load_checkpoint(path)
        for original, restored in zip(net.parameters(), loaded.parameters()):
            np.testing.assert_array_equal(restored, original.astype(np.float32).astype(np.float64))
        assert json.loads(path.read_text())["dtype"] == "f32"

    @staticmethod
    def test_document_layout(rng, tmp_path):
        net = make_mlp([2, 3, 1], rng)
        path = tmp_path / "net.json"
        save_checkpoint(path, net)
        document = json.loads(path.read_text())
        assert document["format_version"] == 1
        assert [layer["act"] for layer in document["layers"]] == ["silu", "identity"]
        assert np.shape(document["layers"][0]["w"]) == (2, 3)

    @staticmethod
    def test_save_is_deterministic(rng, tmp_path):
        net = make_random_net(rng, [3, 5, 2])
        save_checkpoint(tmp_path / "a.json", net, {"b": 1, "a": 2})
        save_checkpoint(tmp_path / "b.json", net, {"a": 2, "b": 1})
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    @staticmethod
    @pytest.mark.parametrize("field, value", [("format_version", 2), ("dtype", "f16")])
    def test_rejects_unknown_format(rng, tmp_path, field, value):
        path = tmp_path / "net.json"
        save_checkpoint(path, make_mlp([2, 1], rng))
        document = json.loads(path.read_text())
        document[field] = value
        path.write_text(json.dumps(document))
        with pytest.raises(errors.CheckpointFormatError):
            load_checkpoint(path)

    @staticmethod
    def test_rejects_malformed_layers(tmp_path):
        path = tmp_path / "net.json"
        path.write_text(json.dumps({"format_version": 1, "dtype": "f32", "layers": [{"w": [[1.0]]}]}))
        with pytest.raises(errors.CheckpointFormatError):
            load_checkpoint(path)

    @staticmethod
    def test_rejects_invalid_json(tmp_path):
        path = tmp_path / "net.json"
        path.write_text("{not json")
        with pytest.raises(errors.CheckpointFormatError):
            load_checkpoint(path)
