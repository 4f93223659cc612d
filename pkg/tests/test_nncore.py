"""
Tests for the dense network core: value types, forward/backward, SGD, evaluation.
"""

import math

import numpy as np
import pytest

from app.core.errors import NumericError, RejectedInputError
from app.models.nn import Batch, GradientVector, ModelParams, ModelSpec
from app.schemas.experiment import SyntheticBlobsDataset
from app.services.dataset_service import generate_synthetic
from app.services.training_service import (
    compute_gradients,
    evaluate,
    forward,
    init_params,
    local_train,
    sgd_step,
)

SMALL_SPEC = ModelSpec((3, 4, 2), "tanh")


def _random_batch(rng, n=5, dim=3, classes=2):
    return Batch(rng.normal(size=(n, dim)), rng.integers(0, classes, size=n))


def _numeric_gradient(model, batch, step=1e-5):
    grad = np.zeros_like(model.values)
    for i in range(len(grad)):
        upper = model.values.copy()
        lower = model.values.copy()
        upper[i] += step
        lower[i] -= step
        _, loss_up = forward(ModelParams(model.spec, upper), batch)
        _, loss_down = forward(ModelParams(model.spec, lower), batch)
        grad[i] = (loss_up - loss_down) / (2 * step)
    return grad


def test_parameter_count_and_flattening_order():
    """Test weights precede biases layer by layer."""
    spec = ModelSpec((2, 3, 1))
    assert spec.parameter_count == 2 * 3 + 3 + 3 * 1 + 1
    values = np.arange(spec.parameter_count, dtype=np.float64)
    (w1, b1), (w2, b2) = spec.unflatten(values)
    assert w1.shape == (2, 3)
    np.testing.assert_array_equal(w1.ravel(), values[:6])
    np.testing.assert_array_equal(b1, values[6:9])
    np.testing.assert_array_equal(w2.ravel(), values[9:12])
    np.testing.assert_array_equal(spec.flatten(spec.unflatten(values)), values)


def test_fingerprint_depends_on_architecture():
    """Test different activations or widths give different fingerprints."""
    assert ModelSpec((3, 4, 2), "tanh").fingerprint == SMALL_SPEC.fingerprint
    assert ModelSpec((3, 4, 2), "relu").fingerprint != SMALL_SPEC.fingerprint
    assert ModelSpec((3, 5, 2), "tanh").fingerprint != SMALL_SPEC.fingerprint


def test_spec_rejects_bad_layers():
    """Test invalid architectures are refused."""
    with pytest.raises(RejectedInputError):
        ModelSpec((3,))
    with pytest.raises(RejectedInputError):
        ModelSpec((3, 0, 2))
    with pytest.raises(RejectedInputError):
        ModelSpec((3, 4, 2), "softplus")


def test_zero_model_loss_is_log_k():
    """Test zero logits give a uniform softmax."""
    spec = ModelSpec((4, 5))
    model = ModelParams(spec, np.zeros(spec.parameter_count))
    batch = _random_batch(np.random.default_rng(0), n=7, dim=4, classes=5)
    _, loss = forward(model, batch)
    assert loss == pytest.approx(math.log(5))


def test_hand_computed_loss():
    """Test a 2-2-2 identity network against a hand-derived value."""
    spec = ModelSpec((2, 2, 2), "relu")
    model = ModelParams(spec, spec.flatten([(np.eye(2), np.zeros(2)), (np.eye(2), np.zeros(2))]))
    _, loss = forward(model, Batch(np.array([[1.0, 0.0]]), np.array([0])))
    assert loss == pytest.approx(math.log(1.0 + math.exp(-1.0)))


def test_saturated_prediction_has_near_zero_loss_and_gradient():
    """Test a perfectly fit point is a stationary point."""
    spec = ModelSpec((1, 2))
    model = ModelParams(spec, np.array([0.0, 0.0, 50.0, -50.0]))
    batch = Batch(np.array([[1.0]]), np.array([0]))
    _, loss = forward(model, batch)
    assert loss < 1e-12
    assert np.max(np.abs(compute_gradients(model, batch).values)) < 1e-6


@pytest.mark.parametrize("activation", ["relu", "tanh", "sigmoid"])
def test_gradients_match_finite_differences(activation):
    """Test backprop against central finite differences."""
    rng = np.random.default_rng(42)
    spec = ModelSpec((3, 4, 3, 2), activation)
    model = init_params(spec, rng)
    batch = _random_batch(rng, n=6)
    analytic = compute_gradients(model, batch).values
    numeric = _numeric_gradient(model, batch)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8)


def test_soft_labels_match_one_hot_gradient():
    """Test one-hot soft labels reproduce the hard-label gradient."""
    rng = np.random.default_rng(1)
    model = init_params(SMALL_SPEC, rng)
    batch = _random_batch(rng)
    soft = batch.with_labels(batch.targets(2))
    np.testing.assert_allclose(
        compute_gradients(model, soft).values, compute_gradients(model, batch).values, rtol=1e-12
    )


def test_duplicated_batch_gives_same_gradient():
    """Test the gradient is a mean over rows."""
    rng = np.random.default_rng(2)
    model = init_params(SMALL_SPEC, rng)
    batch = _random_batch(rng)
    doubled = Batch.concat([batch, batch])
    np.testing.assert_allclose(
        compute_gradients(model, doubled).values, compute_gradients(model, batch).values, rtol=1e-12, atol=1e-15
    )


def test_dimension_mismatch_rejected():
    """Test a batch of the wrong width is refused."""
    model = init_params(SMALL_SPEC, np.random.default_rng(0))
    with pytest.raises(RejectedInputError):
        forward(model, _random_batch(np.random.default_rng(0), dim=5))


def test_overflow_raises_numeric_error_with_layer():
    """Test huge weights surface the offending layer."""
    spec = ModelSpec((2, 2, 2), "relu")
    model = ModelParams(spec, np.full(spec.parameter_count, 1e308))
    with pytest.raises(NumericError) as exc_info:
        compute_gradients(model, Batch(np.ones((1, 2)), np.array([0])))
    assert exc_info.value.layer_index == 0


def test_sgd_step_update_rule():
    """Test values' = values - lr * grad."""
    spec = ModelSpec((1, 1))
    model = ModelParams(spec, np.array([1.0, 2.0]))
    grad = GradientVector(np.array([0.5, -0.5]), spec.fingerprint)
    np.testing.assert_array_equal(sgd_step(model, grad, 1.0).values, [0.5, 2.5])
    np.testing.assert_array_equal(sgd_step(model, GradientVector.zeros(spec), 0.3).values, model.values)


def test_two_half_steps_equal_one_step():
    """Test linearity of the update rule."""
    model = init_params(SMALL_SPEC, np.random.default_rng(3))
    grad = GradientVector(np.random.default_rng(4).normal(size=SMALL_SPEC.parameter_count), SMALL_SPEC.fingerprint)
    twice = sgd_step(sgd_step(model, grad, 0.05), grad, 0.05)
    once = sgd_step(model, grad, 0.1)
    np.testing.assert_allclose(twice.values, once.values, rtol=1e-12, atol=1e-15)


def test_sgd_step_rejects_foreign_gradient():
    """Test a gradient from another spec is refused."""
    model = init_params(SMALL_SPEC, np.random.default_rng(0))
    other = ModelSpec((3, 5, 2), "tanh")
    with pytest.raises(RejectedInputError):
        sgd_step(model, GradientVector.zeros(other), 0.1)


def test_local_train_with_zero_lr_returns_zero_update():
    """Test lr = 0 leaves the model untouched."""
    rng = np.random.default_rng(5)
    model = init_params(SMALL_SPEC, rng)
    new_params, update = local_train(model, _random_batch(rng, n=20), epochs=3, lr=0.0, batch_size=4)
    assert not np.any(update.values)
    np.testing.assert_array_equal(new_params.values, model.values)


def test_local_train_rejects_bad_arguments():
    """Test epochs >= 1 and a nonempty cluster are required."""
    rng = np.random.default_rng(0)
    model = init_params(SMALL_SPEC, rng)
    with pytest.raises(RejectedInputError):
        local_train(model, _random_batch(rng), epochs=0, lr=0.1, batch_size=2)
    with pytest.raises(RejectedInputError):
        local_train(model, _random_batch(rng).subset([]), epochs=1, lr=0.1, batch_size=2)


def test_local_train_is_deterministic():
    """Test identical inputs give bit-identical parameters."""
    batch = _random_batch(np.random.default_rng(6), n=30)
    first, _ = local_train(init_params(SMALL_SPEC, np.random.default_rng(7)), batch, 3, 0.1, 8)
    second, _ = local_train(init_params(SMALL_SPEC, np.random.default_rng(7)), batch, 3, 0.1, 8)
    np.testing.assert_array_equal(first.values, second.values)


def test_xor_is_learned():
    """Test a 2-4-2 network fits XOR."""
    xor = Batch(np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]), np.array([0, 1, 1, 0]))
    spec = ModelSpec((2, 4, 2), "tanh")
    solved = 0
    for seed in range(5):
        model, _ = local_train(init_params(spec, np.random.default_rng(seed)), xor, 2000, 0.5, 4)
        accuracy, _ = evaluate(model, xor)
        solved += accuracy == 1.0
    assert solved >= 3


def test_loss_decreases_over_epochs_on_a_cluster():
    """Test 5 epochs of SGD on a 250-example cluster reduce the loss every epoch."""
    spec = ModelSpec((16, 32, 4), "relu")
    decreasing = 0
    for trial in range(10):
        cluster = generate_synthetic(SyntheticBlobsDataset(n=250, dim=16, classes=4), trial)
        start = init_params(spec, np.random.default_rng(100 + trial))
        losses = [forward(start, cluster)[1]]

        def record(epoch, params, cluster=cluster, losses=losses):
            losses.append(forward(params, cluster)[1])

        local_train(start, cluster, 5, 0.1, 32, on_epoch=record)
        decreasing += all(b < a for a, b in zip(losses, losses[1:]))
    assert decreasing >= 9


def test_evaluate_constant_predictor():
    """Test a model always predicting class 0 scores the class-0 share."""
    spec = ModelSpec((2, 2))
    model = ModelParams(spec, np.array([0.0, 0.0, 0.0, 0.0, 1.0, 0.0]))
    labels = np.array([0, 0, 0, 0, 1, 1, 1, 1, 1, 1])
    batch = Batch(np.random.default_rng(0).normal(size=(10, 2)), labels)
    accuracy, _ = evaluate(model, batch)
    assert accuracy == pytest.approx(0.4)


def test_evaluate_is_order_invariant():
    """Test shuffling rows does not change accuracy."""
    rng = np.random.default_rng(8)
    model = init_params(SMALL_SPEC, rng)
    batch = _random_batch(rng, n=50)
    shuffled = batch.subset(rng.permutation(50))
    assert evaluate(model, batch)[0] == evaluate(model, shuffled)[0]
    assert evaluate(model, batch)[1] == pytest.approx(evaluate(model, shuffled)[1])


def test_evaluate_in_chunks_matches_single_pass():
    """Test chunked evaluation equals a one-shot forward pass."""
    rng = np.random.default_rng(9)
    model = init_params(SMALL_SPEC, rng)
    batch = _random_batch(rng, n=23)
    accuracy, loss = evaluate(model, batch, chunk_size=5)
    _, full_loss = forward(model, batch)
    assert loss == pytest.approx(full_loss)
    assert 0.0 <= accuracy <= 1.0


if __name__ == "__main__":
    pytest.main([__file__])
