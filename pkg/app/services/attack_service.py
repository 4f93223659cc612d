"""Adversary behaviors: label flipping, pixel-pattern backdoor, gradient leakage."""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import minimize

from app.core.errors import AttackAbortedError, NumericError, RejectedInputError
from app.core.rng import SeedStreams
from app.models.attack import AnomalyReference, DlgResult
from app.models.nn import Batch, GradientVector, ModelParams, ModelSpec
from app.schemas.experiment import BackdoorSpec, ExperimentConfig, LabelFlipAttack, corner_pattern
from app.services.dataset_service import load_dataset
from app.services.metrics_service import write_dlg_summary, write_dlg_trace
from app.services.privacy_service import apply_policy
from app.services.training_service import (
    compute_gradients,
    forward,
    init_params,
    loss_and_gradients,
    predict,
)

logger = logging.getLogger(__name__)


def label_flip(dataset: Batch, c_src: int, c_target: int) -> Batch:
    """Relabel every c_src example as c_target."""
    labels = dataset.class_indices().copy()
    labels[labels == c_src] = c_target
    return dataset.with_labels(labels)


def swap_labels(dataset: Batch, c_a: int, c_b: int) -> Batch:
    """Relabel c_a as c_b and c_b as c_a in one pass."""
    labels = dataset.class_indices()
    swapped = labels.copy()
    swapped[labels == c_a] = c_b
    swapped[labels == c_b] = c_a
    return dataset.with_labels(swapped)


def poison_labels(dataset: Batch, attack: LabelFlipAttack, rng: Optional[np.random.Generator] = None) -> Batch:
    """Apply a label-flip scenario to `attack.fraction` of the rows."""
    flip = swap_labels if attack.swap else label_flip
    if attack.fraction >= 1.0:
        return flip(dataset, attack.c_src, attack.c_target)
    n_poisoned = int(round(attack.fraction * len(dataset)))
    if n_poisoned == 0:
        return dataset
    rows = _pick_rows(len(dataset), n_poisoned, rng)
    flipped = flip(dataset.subset(rows), attack.c_src, attack.c_target).labels
    labels = dataset.class_indices().copy()
    labels[rows] = flipped
    return dataset.with_labels(labels)


def _pick_rows(n: int, k: int, rng: Optional[np.random.Generator]) -> np.ndarray:
    if rng is None:
        return np.arange(k)
    return np.sort(rng.choice(n, size=k, replace=False))


def resolve_pattern(spec: BackdoorSpec, batch: Batch) -> List[Tuple[int, float]]:
    pattern = spec.pattern if spec.pattern is not None else corner_pattern(batch.image_shape, batch.input_dim)
    for index, _ in pattern:
        if not 0 <= index < batch.input_dim:
            raise RejectedInputError(f"pattern pixel {index} outside input width {batch.input_dim}")
    return [(int(index), float(value)) for index, value in pattern]


def apply_pixel_pattern(
    batch: Batch,
    spec: BackdoorSpec,
    rng: Optional[np.random.Generator] = None,
    fraction: Optional[float] = None,
) -> Batch:
    """
    Stamp the backdoor pattern on a share of the batch and relabel those rows.

    Args:
        batch: Clean examples
        spec: Backdoor definition
        rng: Picks the poisoned rows; None takes the first rows
        fraction: Overrides spec.poison_fraction

    Returns:
        Batch of the same size; non-pattern pixels are untouched
    """
    pattern = resolve_pattern(spec, batch)
    share = spec.poison_fraction if fraction is None else fraction
    n_poisoned = int(round(share * len(batch)))
    if not pattern or n_poisoned == 0:
        return batch
    rows = _pick_rows(len(batch), n_poisoned, rng)
    inputs = batch.inputs.copy()
    pixels = np.array([index for index, _ in pattern])
    values = np.array([value for _, value in pattern])
    inputs[np.ix_(rows, pixels)] = values
    labels = batch.class_indices().copy()
    labels[rows] = spec.target_label
    return Batch(inputs, labels, batch.image_shape)


def anomaly_loss(x: ModelParams, anomaly_ref: AnomalyReference) -> float:
    """Squared distance between the attacker's update and its benign estimate."""
    deviation = x.delta_from(anomaly_ref.base)
    deviation.require_compatible(anomaly_ref.benign_update.spec_fingerprint)
    return float(np.sum((deviation.values - anomaly_ref.benign_update.values) ** 2))


def constrain_and_scale(
    global_params: ModelParams,
    local_data: Batch,
    spec: BackdoorSpec,
    anomaly_ref: AnomalyReference,
    batch_size: int,
    rng: Optional[np.random.Generator] = None,
) -> GradientVector:
    """
    Train a backdoored model that stays close to a benign update, then scale it.

    Minimizes alpha * L_class + (1 - alpha) * L_ano over pattern-poisoned
    mini-batches for up to E_adv epochs, divides lr_adv by step_rate after the
    scheduled epochs, and stops early once the backdoor loss on the fully
    stamped local data drops below eps_stop.

    Returns:
        gamma * (X - G), so that the merged block corresponds to gamma(X - G) + G
    """
    if len(local_data) == 0:
        raise RejectedInputError("attacker has no local data")
    anomaly_ref.benign_update.require_compatible(global_params.fingerprint)

    backdoor_set = apply_pixel_pattern(local_data, spec, fraction=1.0)
    schedule = set(spec.resolved_step_sched())
    lr = spec.lr_adv
    x = global_params
    try:
        for epoch in range(spec.epochs_adv):
            poisoned = apply_pixel_pattern(local_data, spec, rng)
            for minibatch in poisoned.minibatches(batch_size):
                _, class_grad = loss_and_gradients(x, minibatch)
                step = class_grad.values
                if spec.alpha < 1.0:
                    deviation = x.values - global_params.values - anomaly_ref.benign_update.values
                    step = spec.alpha * step + (1.0 - spec.alpha) * 2.0 * deviation
                x = ModelParams(x.spec, x.values - lr * step)
            if epoch + 1 in schedule:
                lr /= spec.step_rate
            _, backdoor_loss = forward(x, backdoor_set)
            if backdoor_loss < spec.eps_stop:
                logger.debug(f"Backdoor converged after {epoch + 1} epochs (loss {backdoor_loss:.4g})")
                break
        update = x.delta_from(global_params)
        return update.with_values(spec.gamma * update.values)
    except NumericError as e:
        raise AttackAbortedError(f"constrain-and-scale diverged: {e}") from e


def backdoor_accuracy(model: ModelParams, test_set: Batch, spec: BackdoorSpec) -> float:
    """Share of pattern-stamped test examples classified as the target label."""
    if len(test_set) == 0:
        raise RejectedInputError("backdoor accuracy needs a nonempty test set")
    stamped = apply_pixel_pattern(test_set, spec, fraction=1.0)
    return float(np.mean(predict(model, stamped.inputs) == spec.target_label))


class _Diverged(Exception):
    pass


def dlg_reconstruct(
    model: ModelParams,
    g_real: GradientVector,
    input_shape: Sequence[int],
    n_classes: int,
    iters: int,
    rng: np.random.Generator,
    ground_truth: Optional[np.ndarray] = None,
    initial_input: Optional[np.ndarray] = None,
    initial_label: Optional[np.ndarray] = None,
    fd_step: float = 1e-6,
) -> DlgResult:
    """
    Reconstruct one private example from its shared gradient.

    Minimizes ||grad(model, dummy) - g_real||^2 over a dummy input in [0, 1]
    and a soft label (non-negative, normalized to sum 1) with L-BFGS-B. The
    gradient of the match loss is taken by central finite differences.

    Args:
        model: Parameters the victim computed g_real at
        g_real: Victim gradient, possibly transformed by a countermeasure
        input_shape: Shape of one example (flattened internally)
        n_classes: Width of the soft label
        iters: Maximum optimizer iterations
        rng: Draws the dummy initialization
        ground_truth: Optional true input for the per-iteration MSE
        initial_input / initial_label: Override the random initialization
        fd_step: Finite-difference step

    Returns:
        DlgResult with the trajectory; diverged runs stop at the last finite point
    """
    g_real.require_compatible(model.fingerprint)
    if iters < 1:
        raise RejectedInputError("iters must be >= 1")
    input_dim = int(np.prod(input_shape))
    if input_dim != model.spec.n_inputs or n_classes != model.spec.n_outputs:
        raise RejectedInputError("dummy shape does not match the model")

    x0 = rng.uniform(0.0, 1.0, size=input_dim) if initial_input is None else np.ravel(initial_input)
    y0 = rng.uniform(0.0, 1.0, size=n_classes) if initial_label is None else np.ravel(initial_label)
    z0 = np.concatenate([x0, y0]).astype(np.float64)
    truth = None if ground_truth is None else np.ravel(ground_truth).astype(np.float64)
    target = g_real.values

    def split(z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x, raw_label = z[:input_dim], z[input_dim:]
        total = raw_label.sum()
        label = raw_label / total if total > 0 else np.full(n_classes, 1.0 / n_classes)
        return x, label

    def match_loss(z: np.ndarray) -> float:
        x, label = split(z)
        dummy = Batch(x[None, :], label[None, :], tuple(input_shape))
        try:
            diff = compute_gradients(model, dummy).values - target
        except NumericError as e:
            raise _Diverged(str(e)) from e
        loss = float(diff @ diff)
        if not np.isfinite(loss):
            raise _Diverged("non-finite match loss")
        return loss

    def match_grad(z: np.ndarray) -> np.ndarray:
        grad = np.zeros_like(z)
        for i in range(z.shape[0]):
            shifted = z.copy()
            shifted[i] = z[i] + fd_step
            upper = match_loss(shifted)
            shifted[i] = z[i] - fd_step
            lower = match_loss(shifted)
            grad[i] = (upper - lower) / (2.0 * fd_step)
        return grad

    result = DlgResult()

    def record(z: np.ndarray, loss: Optional[float] = None) -> None:
        value = match_loss(z) if loss is None else loss
        x, label = split(z)
        result.dummy_inputs.append(x.copy())
        result.dummy_labels.append(label.copy())
        result.match_loss.append(value)
        result.mse.append(None if truth is None else float(np.mean((x - truth) ** 2)))

    bounds = [(0.0, 1.0)] * (input_dim + n_classes)
    try:
        record(z0)
        minimize(
            match_loss,
            z0,
            jac=match_grad,
            method="L-BFGS-B",
            bounds=bounds,
            callback=record,
            options={"maxiter": iters, "ftol": 1e-16, "gtol": 1e-12},
        )
    except _Diverged as e:
        result.diverged = True
        logger.warning(f"Gradient-leakage reconstruction diverged after {result.iterations} iterations: {e}")
    return result


def run_leakage_comparison(
    config: ExperimentConfig, output_dir: Optional[Union[str, Path]] = None
) -> Dict[str, DlgResult]:
    """
    Reconstruct one training example from its raw gradient and from each countermeasure.

    Every variant starts from the same dummy initialization, so the final
    match loss and MSE are comparable across rows of dlg_summary.csv.

    Args:
        config: Experiment whose dataset, seed and `dlg` block drive the run
        output_dir: Where dlg_trace_<variant>.csv and dlg_summary.csv go (None writes nothing)

    Returns:
        Variant label ("none", "prune_0.6", ...) -> DlgResult
    """
    streams = SeedStreams(config.seed)
    split = load_dataset(config.dataset, streams.stream("dataset"))
    sample = split.train.subset([config.dlg.sample_index])
    spec = ModelSpec((sample.input_dim, *config.dlg.hidden, split.n_classes), config.dlg.activation)
    model = init_params(spec, streams.stream("dlg-model"))
    g_real = compute_gradients(model, sample)
    input_shape = sample.image_shape or (sample.input_dim,)

    variants = {"none": g_real}
    for index, policy in enumerate(config.dlg.countermeasures):
        variants[policy.label()] = apply_policy(g_real, policy, streams.stream("dlg-dp", index))

    results: Dict[str, DlgResult] = {}
    for label, gradient in variants.items():
        result = dlg_reconstruct(
            model, gradient, input_shape, split.n_classes, config.dlg.iters,
            streams.stream("dlg-init"),
            ground_truth=sample.inputs[0],
            fd_step=config.dlg.fd_step,
        )
        logger.info(
            f"Leakage '{label}': match loss {result.final_match_loss}, "
            f"mse {result.final_mse} after {result.iterations} iterations"
        )
        results[label] = result
        if output_dir is not None:
            write_dlg_trace(result, output_dir, f"dlg_trace_{label}")
    if output_dir is not None:
        write_dlg_summary(results, output_dir)
    return results
