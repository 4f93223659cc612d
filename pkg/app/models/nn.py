"""Value types for the dense network core.

Flattening order is layer-major, weights before biases, weight matrices
row-major with shape (fan_in, fan_out). Block payload hashing depends on it.
"""

import hashlib
import json
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple, Union

import numpy as np

from app.core.errors import NumericError, RejectedInputError

ACTIVATIONS = ("relu", "tanh", "sigmoid")


def _frozen_array(values, dtype=np.float64) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class ModelSpec:
    """Dense architecture: layer widths plus one activation tag per hidden layer."""

    layer_sizes: Tuple[int, ...]
    activation: Union[str, Tuple[str, ...]] = "relu"

    def __post_init__(self):
        sizes = tuple(int(w) for w in self.layer_sizes)
        if len(sizes) < 2:
            raise RejectedInputError("a model needs at least an input and an output layer")
        if any(w < 1 for w in sizes):
            raise RejectedInputError(f"layer widths must be >= 1, got {sizes}")
        object.__setattr__(self, "layer_sizes", sizes)

        n_hidden = len(sizes) - 2
        if isinstance(self.activation, str):
            tags = (self.activation,) * n_hidden
        else:
            tags = tuple(self.activation)
            if len(tags) != n_hidden:
                raise RejectedInputError(
                    f"expected {n_hidden} activation tags, got {len(tags)}"
                )
        for tag in tags:
            if tag not in ACTIVATIONS:
                raise RejectedInputError(f"unknown activation '{tag}'")
        object.__setattr__(self, "activation", tags)

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        """Number of weight layers."""
        return len(self.layer_sizes) - 1

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        return list(zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def parameter_count(self) -> int:
        return sum(w_in * w_out + w_out for w_in, w_out in self.layer_shapes)

    @property
    def fingerprint(self) -> str:
        canonical = json.dumps(
            {"layer_sizes": list(self.layer_sizes), "activation": list(self.activation)},
            sort_keys=True,
            separators=(",", ":"),
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "activation": list(self.activation)}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        return cls(tuple(data["layer_sizes"]), tuple(data["activation"]))

    def unflatten(self, values: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Split a flat vector into per-layer (weights, bias) views."""
        if values.shape != (self.parameter_count,):
            raise RejectedInputError(
                f"expected {self.parameter_count} values, got shape {values.shape}"
            )
        layers = []
        offset = 0
        for w_in, w_out in self.layer_shapes:
            weights = values[offset:offset + w_in * w_out].reshape(w_in, w_out)
            offset += w_in * w_out
            bias = values[offset:offset + w_out]
            offset += w_out
            layers.append((weights, bias))
        return layers

    def flatten(self, layers: Sequence[Tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
        parts = []
        for weights, bias in layers:
            parts.append(np.asarray(weights, dtype=np.float64).ravel())
            parts.append(np.asarray(bias, dtype=np.float64).ravel())
        return np.concatenate(parts)


@dataclass(frozen=True, eq=False)
class GradientVector:
    """Flat update/gradient for one model spec; the unit shared on the ledger."""

    values: np.ndarray
    spec_fingerprint: str

    def __post_init__(self):
        array = _frozen_array(self.values)
        if array.ndim != 1:
            raise RejectedInputError("gradient vectors are one-dimensional")
        if not np.all(np.isfinite(array)):
            raise NumericError("gradient vector contains non-finite values")
        object.__setattr__(self, "values", array)

    def __len__(self) -> int:
        return self.values.shape[0]

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "GradientVector":
        return cls(np.zeros(spec.parameter_count), spec.fingerprint)

    def with_values(self, values: np.ndarray) -> "GradientVector":
        return GradientVector(values, self.spec_fingerprint)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def require_compatible(self, other_fingerprint: str) -> None:
        if self.spec_fingerprint != other_fingerprint:
            raise RejectedInputError("gradient vector belongs to a different model spec")


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Model parameters as one flat vector plus the spec that shapes them."""

    spec: ModelSpec
    values: np.ndarray

    def __post_init__(self):
        array = _frozen_array(self.values)
        if array.shape != (self.spec.parameter_count,):
            raise RejectedInputError(
                f"expected {self.spec.parameter_count} parameters, got shape {array.shape}"
            )
        if not np.all(np.isfinite(array)):
            raise NumericError("model parameters contain non-finite values")
        object.__setattr__(self, "values", array)

    @property
    def fingerprint(self) -> str:
        return self.spec.fingerprint

    def layers(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return self.spec.unflatten(self.values)

    def as_vector(self) -> GradientVector:
        return GradientVector(self.values, self.spec.fingerprint)

    def apply_update(self, update: GradientVector) -> "ModelParams":
        update.require_compatible(self.fingerprint)
        return ModelParams(self.spec, self.values + update.values)

    def delta_from(self, start: "ModelParams") -> GradientVector:
        """self - start as a gradient vector."""
        if start.fingerprint != self.fingerprint:
            raise RejectedInputError("cannot diff parameters of different specs")
        return GradientVector(self.values - start.values, self.fingerprint)


@dataclass(frozen=True, eq=False)
class Batch:
    """Stacked examples. Labels are class indices (1-D) or soft targets (2-D)."""

    inputs: np.ndarray
    labels: np.ndarray
    image_shape: Tuple[int, ...] = field(default=())

    def __post_init__(self):
        inputs = _frozen_array(self.inputs)
        if inputs.ndim != 2:
            raise RejectedInputError("batch inputs must be a (batch, features) matrix")
        labels = np.array(self.labels, copy=True)
        if labels.ndim == 1:
            labels = labels.astype(np.int64)
        elif labels.ndim == 2:
            labels = labels.astype(np.float64)
        else:
            raise RejectedInputError("labels must be class indices or a soft-label matrix")
        if labels.shape[0] != inputs.shape[0]:
            raise RejectedInputError(
                f"{inputs.shape[0]} inputs but {labels.shape[0]} labels"
            )
        labels.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "image_shape", tuple(int(d) for d in self.image_shape))

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def is_soft(self) -> bool:
        return self.labels.ndim == 2

    def targets(self, n_classes: int) -> np.ndarray:
        """Labels as a (batch, n_classes) target matrix."""
        if self.is_soft:
            if self.labels.shape[1] != n_classes:
                raise RejectedInputError(
                    f"soft labels have {self.labels.shape[1]} classes, model has {n_classes}"
                )
            return self.labels
        if len(self) and (self.labels.min() < 0 or self.labels.max() >= n_classes):
            raise RejectedInputError(f"labels must lie in [0, {n_classes})")
        one_hot = np.zeros((len(self), n_classes), dtype=np.float64)
        one_hot[np.arange(len(self)), self.labels] = 1.0
        return one_hot

    def class_indices(self) -> np.ndarray:
        if self.is_soft:
            return np.argmax(self.labels, axis=1)
        return self.labels

    def subset(self, indices: Sequence[int]) -> "Batch":
        index = np.asarray(indices, dtype=np.int64)
        return Batch(self.inputs[index], self.labels[index], self.image_shape)

    def with_labels(self, labels: np.ndarray) -> "Batch":
        return Batch(self.inputs, labels, self.image_shape)

    def with_inputs(self, inputs: np.ndarray) -> "Batch":
        return Batch(inputs, self.labels, self.image_shape)

    def minibatches(self, batch_size: int) -> List["Batch"]:
        """Consecutive slices in row order; the last may be short."""
        if batch_size < 1:
            raise RejectedInputError("batch_size must be >= 1")
        return [
            self.subset(range(start, min(start + batch_size, len(self))))
            for start in range(0, len(self), batch_size)
        ]

    @staticmethod
    def concat(batches: Sequence["Batch"]) -> "Batch":
        if not batches:
            raise RejectedInputError("cannot concatenate zero batches")
        return Batch(
            np.concatenate([b.inputs for b in batches]),
            np.concatenate([b.labels for b in batches]),
            batches[0].image_shape,
        )
