"""Predictor network: forward pass, losses, gradients, training and checkpoints."""

import math

import numpy as np
import pytest
from pydantic import ValidationError

from exitlab.binio import FrameWriter
from exitlab.datasets import ScoreDataset
from exitlab.difficulty_sim import OracleConfig, QualityOracle
from exitlab.errors import DivergenceError, FormatError, ShapeError
from exitlab.predictor import (
    MLP_MAGIC,
    CosineSchedule,
    LayerSpec,
    Mlp,
    TrainConfig,
    cosine_lr,
    evaluate,
    loss,
    predictor_preset,
    train,
)


def _linear(dim_in, dim_out):
    return LayerSpec(in_dim=dim_in, out_dim=dim_out, activation="identity")


class ConstantPredictor:
    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)

    def predict(self, inputs):
        return np.tile(self.value, (len(np.atleast_2d(inputs)), 1))


# --- forward -----------------------------------------------------------------


def test_identity_network_returns_input():
    model = Mlp([_linear(3, 3)], [np.eye(3)], [np.zeros(3)])
    np.testing.assert_array_equal(model.forward([1.0, -2.0, 0.5]), [1.0, -2.0, 0.5])


def test_zero_weights_return_bias():
    model = Mlp([_linear(4, 2)], [np.zeros((4, 2))], [np.array([0.3, 0.7])])
    np.testing.assert_array_equal(model.forward(np.random.default_rng(0).standard_normal(4)), [0.3, 0.7])


def test_two_layer_hand_computation():
    layers = [LayerSpec(in_dim=2, out_dim=2, slope=0.2), _linear(2, 1)]
    model = Mlp(
        layers,
        [np.array([[1.0, -1.0], [2.0, 0.5]]), np.array([[0.5], [3.0]])],
        [np.array([0.1, -0.2]), np.array([1.0])],
    )
    # hidden pre-activations [5.1, -0.2] -> [5.1, -0.04]
    assert model.forward([1.0, 2.0])[0] == pytest.approx(3.43, abs=1e-12)


def test_forward_batches_and_dimension_check():
    model = Mlp.initialise(predictor_preset(5, 3, hidden=(4,)), seed=1)
    batch = np.random.default_rng(1).standard_normal((6, 5))
    out = model.forward(batch)
    assert out.shape == (6, 3)
    np.testing.assert_allclose(out[2], model.forward(batch[2]))
    with pytest.raises(ShapeError):
        model.forward(np.zeros(4))


def test_layer_stack_validation():
    with pytest.raises(ShapeError):
        Mlp(
            [LayerSpec(in_dim=2, out_dim=3), _linear(4, 1)],
            [np.zeros((2, 3)), np.zeros((4, 1))],
            [np.zeros(3), np.zeros(1)],
        )
    with pytest.raises(ShapeError):
        Mlp([LayerSpec(in_dim=2, out_dim=1)], [np.zeros((2, 1))], [np.zeros(1)])
    with pytest.raises(ShapeError):
        Mlp([_linear(2, 1)], [np.zeros((1, 2))], [np.zeros(1)])


def test_preset_dimensions():
    dims = [(spec.in_dim, spec.out_dim) for spec in predictor_preset()]
    assert dims == [(1584, 512), (512, 256), (256, 128), (128, 64), (64, 3)]
    assert predictor_preset()[-1].activation == "identity"
    assert all(spec.activation == "leaky_relu" for spec in predictor_preset()[:-1])


# --- losses and gradients ----------------------------------------------------


def test_loss_examples():
    assert loss([0.2, 0.4], [0.2, 0.4]) == 0.0
    assert loss([1.0, 0.0], [0.0, 0.0], "mse") == pytest.approx(0.5)
    assert loss([1.0, -3.0], [0.0, 0.0], "mae") == pytest.approx(2.0)
    with pytest.raises(ShapeError):
        loss([1.0], [1.0, 2.0])


def test_loss_matches_scalar_loop(rng):
    for _ in range(20):
        pred, target = rng.standard_normal(7), rng.standard_normal(7)
        squared = sum((p - t) ** 2 for p, t in zip(pred, target)) / 7
        absolute = sum(abs(p - t) for p, t in zip(pred, target)) / 7
        assert loss(pred, target, "mse") == pytest.approx(squared, abs=1e-12)
        assert loss(pred, target, "mae") == pytest.approx(absolute, abs=1e-12)


def _finite_difference_ok(model, x, target, mode, eps=1e-5):
    grads = model.backward(x, target, mode)
    for params, analytic in ((model.weights, grads.weights), (model.biases, grads.biases)):
        for p, g in zip(params, analytic):
            for index in np.ndindex(p.shape):
                saved = p[index]
                p[index] = saved + eps
                up = loss(model.forward(x), target, mode)
                p[index] = saved - eps
                down = loss(model.forward(x), target, mode)
                p[index] = saved
                numeric = (up - down) / (2 * eps)
                scale = max(abs(numeric), abs(g[index]))
                if abs(numeric - g[index]) > 1e-3 * scale + 1e-8:
                    return False
    return True


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    dims = [int(d) for d in rng.integers(1, 6, size=rng.integers(2, 4))]
    layers = predictor_preset(int(rng.integers(1, 5)), int(rng.integers(1, 4)), hidden=dims)
    model = Mlp.initialise(layers, seed=seed)
    for i in range(len(model.biases)):
        model.biases[i] = rng.standard_normal(model.biases[i].shape) * 0.1
    x = rng.standard_normal((5, model.input_dim))
    target = rng.standard_normal((5, model.output_dim))
    mode = "mse" if seed % 2 == 0 else "mae"
    assert _finite_difference_ok(model, x, target, mode)


def test_zero_gradient_at_exact_fit():
    model = Mlp.initialise(predictor_preset(3, 2, hidden=(4,)), seed=0)
    x = np.random.default_rng(0).standard_normal((4, 3))
    grads = model.backward(x, model.forward(x), "mse")
    for g in (*grads.weights, *grads.biases):
        np.testing.assert_array_equal(g, np.zeros_like(g))


def test_negative_preactivation_gradient_scaled_by_slope():
    layers = [LayerSpec(in_dim=1, out_dim=1, slope=0.2), _linear(1, 1)]
    model = Mlp(layers, [np.array([[1.0]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)])
    grads = model.backward([-2.0], [0.0], "mse")
    # out = -0.4, dL/dout = -0.8, back through the slope region: -0.8 * 0.2
    assert grads.biases[0][0] == pytest.approx(-0.16)
    assert grads.weights[0][0, 0] == pytest.approx(0.32)
    assert grads.weights[1][0, 0] == pytest.approx(0.32)


# --- schedule and training ---------------------------------------------------


def test_cosine_endpoints_and_monotone():
    assert cosine_lr(0, 10, 0.01, 0.001) == pytest.approx(0.01)
    assert cosine_lr(10, 10, 0.01, 0.001) == pytest.approx(0.001)
    schedule = CosineSchedule(0.01, 50)
    rates = [schedule.get_lr(t) for t in range(51)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    assert rates[25] == pytest.approx(0.005)


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=0.01, min_lr=0.1)
    with pytest.raises(ValidationError):
        TrainConfig(loss="huber")


def test_single_pair_is_memorised():
    model = Mlp.initialise(predictor_preset(3, 2, hidden=(8,)), seed=4)
    data = ScoreDataset(inputs=[[0.5, -1.0, 2.0]], scores=[[0.3, 0.1]])
    result = train(model, data, TrainConfig(learning_rate=0.02, epochs=4000, batch_size=1))
    assert result.history[-1] < 1e-6
    assert len(result.to_frame()) == 4000


def test_training_is_deterministic_and_leaves_input_untouched(small_oracle):
    data = small_oracle.make_dataset(20, 10, val_fraction=0.0).train
    model = Mlp.initialise(predictor_preset(8, 4, hidden=(16,)), seed=2)
    before = [w.copy() for w in model.weights]
    cfg = TrainConfig(epochs=5, batch_size=16, seed=9)
    first, second = train(model, data, cfg), train(model, data, cfg)
    assert first.history == second.history
    for a, b in zip(first.model.weights, second.model.weights):
        assert a.tobytes() == b.tobytes()
    for a, b in zip(before, model.weights):
        np.testing.assert_array_equal(a, b)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_the_epoch(small_oracle):
    data = small_oracle.make_dataset(4, 5, val_fraction=0.0).train
    model = Mlp.initialise(predictor_preset(8, 4, hidden=(8,)), seed=0)
    with pytest.raises(DivergenceError) as info:
        train(model, data, TrainConfig(learning_rate=1e6, epochs=50, batch_size=4))
    assert 0 <= info.value.epoch < 50


def test_train_rejects_mismatched_dataset():
    model = Mlp.initialise(predictor_preset(3, 2, hidden=(4,)), seed=0)
    with pytest.raises(ShapeError):
        train(model, ScoreDataset(inputs=np.zeros((2, 4)), scores=np.zeros((2, 2))), TrainConfig())


def test_evaluate_hand_examples():
    data = ScoreDataset(inputs=[[0.0], [1.0]], scores=[[1.0], [3.0]])
    assert evaluate(ConstantPredictor([2.0]), data).overall == pytest.approx(2.0 / 3.0)

    class Perfect:
        def predict(self, inputs):
            return data.scores

    report = evaluate(Perfect(), data)
    assert report.overall == 0.0
    assert list(report.to_frame()["exit_id"]) == ["1", "mean"]


def test_training_beats_initialisation(small_oracle):
    split = small_oracle.make_dataset(60, 10, val_fraction=0.2)
    model = Mlp.initialise(predictor_preset(8, 4, hidden=(32, 16)), seed=5)
    result = train(model, split.train, TrainConfig(learning_rate=0.02, epochs=40, batch_size=16))
    val_before = loss(model.predict(split.val.inputs), split.val.scores)
    val_after = loss(result.model.predict(split.val.inputs), split.val.scores)
    assert val_after * 10 <= val_before
    assert evaluate(result.model, split.val).overall < evaluate(model, split.val).overall


def test_rescaled_output_predicts_raw_scores():
    rng = np.random.default_rng(3)
    inputs = rng.standard_normal((200, 3))
    scores = 5000.0 + 1000.0 * inputs @ np.array([[0.5], [-0.3], [0.2]])
    data = ScoreDataset(inputs=inputs, scores=scores)
    model = Mlp.initialise([_linear(3, 1)], seed=0)
    scaled = train(model, data, TrainConfig(learning_rate=0.05, epochs=200, batch_size=16))
    raw = train(model, data, TrainConfig(learning_rate=0.05, epochs=200, batch_size=16, standardize_targets=False))
    assert scaled.history[0] < 10.0
    assert raw.history[0] > 1e4 * scaled.history[0]
    assert evaluate(scaled.model, data).overall < 1e-3
    np.testing.assert_allclose(scaled.model.biases[0], [5000.0], rtol=1e-3)


def _skill_oracle(noise_sd=0.02, seed=11):
    return QualityOracle(
        OracleConfig(input_dim=8, exit_capacities=(0.25, 0.5, 1.0, 1.5), noise_sd=noise_sd, link_scale=1.0, seed=seed)
    )


def _fit(train_set, seed=1, epochs=100):
    model = Mlp.initialise(predictor_preset(8, 4, hidden=(64, 32)), seed=0)
    cfg = TrainConfig(learning_rate=0.05, epochs=epochs, batch_size=32, seed=seed)
    return train(model, train_set, cfg).model


@pytest.mark.slow
def test_predictor_skill_on_simulated_data():
    split = _skill_oracle().make_dataset(600, 10, val_fraction=0.1667)
    assert (len(split.train), len(split.val)) == (5000, 1000)
    assert evaluate(_fit(split.train), split.val).overall <= 0.10


@pytest.mark.slow
def test_validation_error_grows_with_oracle_noise():
    means = []
    for noise_sd in (0.0, 1.0, 3.0):
        errors = []
        for seed in (1, 2, 3):
            split = _skill_oracle(noise_sd, seed).make_dataset(100, 10, val_fraction=0.2)
            errors.append(evaluate(_fit(split.train, seed=seed, epochs=60), split.val).overall)
        means.append(float(np.mean(errors)))
    assert means[0] <= means[1] <= means[2]


# --- checkpoints -------------------------------------------------------------


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    model = Mlp.initialise(predictor_preset(6, 3, hidden=(5, 4), slope=0.15), seed=42)
    blob = model.save()
    loaded = Mlp.load(blob)
    assert loaded.save() == blob
    assert loaded.rng_seed == 42
    assert [s.slope for s in loaded.layers] == [0.15, 0.15, 0.15]
    for original, restored in zip(model.weights, loaded.weights):
        np.testing.assert_array_equal(original.astype(np.float32), restored)
    path = loaded.save_file(tmp_path / "p.fncmlp")
    assert Mlp.load_file(path).save() == blob


def test_checkpoint_corruption_is_rejected():
    blob = Mlp.initialise(predictor_preset(4, 2, hidden=(3,)), seed=0).save()
    with pytest.raises(FormatError):
        Mlp.load(blob[:-1])
    damaged = bytearray(blob)
    damaged[len(MLP_MAGIC) + 2] ^= 0x01
    with pytest.raises(FormatError):
        Mlp.load(bytes(damaged))
    with pytest.raises(FormatError):
        Mlp.load(b"FNCDS1" + blob[6:])


def test_checkpoint_with_bad_layer_tag():
    writer = FrameWriter(MLP_MAGIC)
    writer.pack("Iq", 1, 0)
    writer.pack("IIBd", 2, 1, 9, 0.2)
    writer.floats(np.zeros((2, 1)))
    writer.floats(np.zeros(1))
    with pytest.raises(FormatError, match="invalid layer spec"):
        Mlp.load(writer.seal())


def test_checkpoint_with_unchained_layers():
    writer = FrameWriter(MLP_MAGIC)
    writer.pack("Iq", 2, 0)
    writer.pack("IIBd", 2, 3, 1, 0.2)
    writer.pack("IIBd", 4, 1, 0, 0.2)
    for size in (6, 3, 4, 1):
        writer.floats(np.zeros(size))
    with pytest.raises(FormatError):
        Mlp.load(writer.seal())


def test_relative_error_floor_guards_zero_scores():
    data = ScoreDataset(inputs=[[0.0]], scores=[[0.0]])
    report = evaluate(ConstantPredictor([1e-6]), data)
    assert math.isclose(report.overall, 1.0)
