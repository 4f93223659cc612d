"""Dense network training core: forward pass, backpropagation, SGD, evaluation.

All operations are pure over immutable ModelParams/Batch values, so clients
may train concurrently as long as each one brings its own rng stream.
"""

import logging
from typing import Callable, List, Optional, Tuple

import numpy as np

from app.core.errors import NumericError, RejectedInputError
from app.models.nn import Batch, GradientVector, ModelParams, ModelSpec

logger = logging.getLogger(__name__)

EpochCallback = Callable[[int, ModelParams], None]


def _activate(tag: str, z: np.ndarray) -> np.ndarray:
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "tanh":
        return np.tanh(z)
    return 0.5 * (1.0 + np.tanh(0.5 * z))  # sigmoid without exp overflow


def _activation_grad(tag: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if tag == "relu":
        return (z > 0.0).astype(np.float64)
    if tag == "tanh":
        return 1.0 - a * a
    return a * (1.0 - a)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_batch(spec: ModelSpec, batch: Batch) -> None:
    if batch.input_dim != spec.n_inputs:
        raise RejectedInputError(
            f"batch has {batch.input_dim} features, model expects {spec.n_inputs}"
        )
    if len(batch) == 0:
        raise RejectedInputError("batch is empty")


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    layers = []
    for fan_in, fan_out in spec.layer_shapes:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        layers.append((weights, np.zeros(fan_out)))
    return ModelParams(spec, spec.flatten(layers))


def _forward_trace(model: ModelParams, inputs: np.ndarray):
    """Run the network keeping pre-activations and activations for backprop."""
    spec = model.spec
    layers = model.layers()
    activations = [inputs]
    pre_activations = []
    with np.errstate(over="ignore", invalid="ignore"):
        for index, (weights, bias) in enumerate(layers):
            z = activations[-1] @ weights + bias
            if not np.all(np.isfinite(z)):
                raise NumericError(f"non-finite pre-activation in layer {index}", layer_index=index)
            pre_activations.append(z)
            if index < spec.n_layers - 1:
                activations.append(_activate(spec.activation[index], z))
    return layers, pre_activations, activations


def _mean_cross_entropy(logits: np.ndarray, targets: np.ndarray, last_layer: int) -> float:
    loss = float(-np.mean(np.sum(targets * _log_softmax(logits), axis=1)))
    if not np.isfinite(loss):
        raise NumericError("non-finite loss", layer_index=last_layer)
    return loss


def forward(model: ModelParams, batch: Batch) -> Tuple[np.ndarray, float]:
    """Logits and mean cross-entropy of `batch` under `model`."""
    _check_batch(model.spec, batch)
    targets = batch.targets(model.spec.n_outputs)
    _, pre_activations, _ = _forward_trace(model, batch.inputs)
    logits = pre_activations[-1]
    return logits, _mean_cross_entropy(logits, targets, model.spec.n_layers - 1)


def loss_and_gradients(model: ModelParams, batch: Batch) -> Tuple[float, GradientVector]:
    """Mean batch loss and its gradient, flattened like ModelParams."""
    spec = model.spec
    _check_batch(spec, batch)
    targets = batch.targets(spec.n_outputs)
    layers, pre_activations, activations = _forward_trace(model, batch.inputs)
    logits = pre_activations[-1]
    loss = _mean_cross_entropy(logits, targets, spec.n_layers - 1)

    probabilities = np.exp(_log_softmax(logits))
    delta = (probabilities * targets.sum(axis=1, keepdims=True) - targets) / len(batch)
    grads: List[Tuple[np.ndarray, np.ndarray]] = [None] * spec.n_layers
    with np.errstate(over="ignore", invalid="ignore"):
        for index in range(spec.n_layers - 1, -1, -1):
            grads[index] = (activations[index].T @ delta, delta.sum(axis=0))
            if index > 0:
                weights = layers[index][0]
                delta = (delta @ weights.T) * _activation_grad(
                    spec.activation[index - 1], pre_activations[index - 1], activations[index]
                )
                if not np.all(np.isfinite(delta)):
                    raise NumericError(
                        f"non-finite gradient in layer {index - 1}", layer_index=index - 1
                    )
    return loss, GradientVector(spec.flatten(grads), spec.fingerprint)


def compute_gradients(model: ModelParams, batch: Batch) -> GradientVector:
    """Gradient of the mean batch loss w.r.t. every parameter."""
    return loss_and_gradients(model, batch)[1]


def sgd_step(model: ModelParams, grad: GradientVector, lr: float) -> ModelParams:
    grad.require_compatible(model.fingerprint)
    if lr < 0:
        raise RejectedInputError(f"learning rate must be non-negative, got {lr}")
    return ModelParams(model.spec, model.values - lr * grad.values)


def local_train(
    start: ModelParams,
    cluster: Batch,
    epochs: int,
    lr: float,
    batch_size: int,
    on_epoch: Optional[EpochCallback] = None,
) -> Tuple[ModelParams, GradientVector]:
    """
    Mini-batch SGD over one data cluster.

    Args:
        start: Parameters pulled from the latest global block
        cluster: Training examples, visited in row order every epoch
        epochs: Number of passes over the cluster
        lr: Learning rate
        batch_size: Mini-batch size
        on_epoch: Optional hook called with (epoch, params) after each epoch

    Returns:
        (new_params, update) where update = new_params - start
    """
    if epochs < 1:
        raise RejectedInputError(f"epochs must be >= 1, got {epochs}")
    if len(cluster) == 0:
        raise RejectedInputError("cannot train on an empty cluster")

    minibatches = cluster.minibatches(batch_size)
    params = start
    for epoch in range(epochs):
        for minibatch in minibatches:
            params = sgd_step(params, compute_gradients(params, minibatch), lr)
        if on_epoch is not None:
            on_epoch(epoch, params)
    return params, params.delta_from(start)


def predict(model: ModelParams, inputs: np.ndarray) -> np.ndarray:
    _, pre_activations, _ = _forward_trace(model, inputs)
    return np.argmax(pre_activations[-1], axis=1)


def evaluate(model: ModelParams, dataset: Batch, chunk_size: int = 2048) -> Tuple[float, float]:
    """Accuracy (argmax-correct fraction) and mean loss over a dataset."""
    _check_batch(model.spec, dataset)
    correct = 0
    loss_sum = 0.0
    for start in range(0, len(dataset), chunk_size):
        chunk = dataset.subset(range(start, min(start + chunk_size, len(dataset))))
        logits, loss = forward(model, chunk)
        correct += int(np.sum(np.argmax(logits, axis=1) == chunk.class_indices()))
        loss_sum += loss * len(chunk)
    return correct / len(dataset), loss_sum / len(dataset)
