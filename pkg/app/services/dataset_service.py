"""Dataset ingestion: MNIST IDX files and seeded synthetic generators."""

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from app.core.errors import IngestionError, RejectedInputError
from app.models.nn import Batch
from app.schemas.experiment import (
    DatasetSpec,
    MnistIdxDataset,
    SyntheticBlobsDataset,
    SyntheticImagesDataset,
    dataset_classes,
    dataset_image_shape,
)

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    train: Batch
    test: Batch
    n_classes: int
    name: str


def _read_bytes(path: Path) -> bytes:
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as fin:
                return fin.read()
        return path.read_bytes()
    except OSError as e:
        raise IngestionError(str(path), f"cannot read file: {e}") from e


def _read_idx_images(path: Path) -> Tuple[np.ndarray, Tuple[int, int]]:
    data = _read_bytes(path)
    if len(data) < 16:
        raise IngestionError(str(path), "truncated IDX image header")
    magic, n_images, n_rows, n_cols = struct.unpack(">IIII", data[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise IngestionError(str(path), f"bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    expected = n_images * n_rows * n_cols
    if len(data) - 16 < expected:
        raise IngestionError(str(path), f"truncated file: {len(data) - 16} pixel bytes, expected {expected}")
    pixels = np.frombuffer(data, dtype=">u1", count=expected, offset=16)
    return pixels.reshape(n_images, n_rows * n_cols), (n_rows, n_cols)


def _read_idx_labels(path: Path) -> np.ndarray:
    data = _read_bytes(path)
    if len(data) < 8:
        raise IngestionError(str(path), "truncated IDX label header")
    magic, n_labels = struct.unpack(">II", data[:8])
    if magic != IDX_LABELS_MAGIC:
        raise IngestionError(str(path), f"bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(data) - 8 < n_labels:
        raise IngestionError(str(path), f"truncated file: {len(data) - 8} labels, expected {n_labels}")
    return np.frombuffer(data, dtype=">u1", count=n_labels, offset=8)


def load_mnist_idx(images_path: Union[str, Path], labels_path: Union[str, Path], cap: int) -> Batch:
    """
    Read an IDX image/label file pair.

    Args:
        images_path: IDX3 image file (optionally gzip-compressed)
        labels_path: IDX1 label file
        cap: Maximum number of examples to keep

    Returns:
        Batch of flattened images scaled to [0, 1]
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    if cap <= 0:
        raise IngestionError(str(images_path), f"cap {cap} leaves no examples to train on")
    pixels, image_shape = _read_idx_images(images_path)
    labels = _read_idx_labels(labels_path)
    if pixels.shape[0] != labels.shape[0]:
        raise IngestionError(
            str(labels_path),
            f"{labels.shape[0]} labels but {pixels.shape[0]} images in {images_path.name}",
        )
    count = min(cap, pixels.shape[0])
    labels = labels[:count].astype(np.int64)
    if count and labels.max() > 9:
        raise IngestionError(str(labels_path), f"label {labels.max()} outside [0, 9]")
    inputs = pixels[:count].astype(np.float64) / 255.0
    logger.info(f"Loaded {count} examples from {images_path.name}")
    return Batch(inputs, labels, image_shape)


def class_counts(n: int, weights: Optional[List[float]], classes: int) -> np.ndarray:
    """Exact per-class counts for `n` examples (largest remainder)."""
    if weights is None:
        weights = [1.0] * classes
    proportions = np.asarray(weights, dtype=np.float64)
    if proportions.shape != (classes,) or np.any(proportions < 0) or proportions.sum() <= 0:
        raise RejectedInputError("class_weights must be one non-negative weight per class")
    proportions = proportions / proportions.sum()
    counts = np.floor(proportions * n).astype(np.int64)
    remainder = n - counts.sum()
    order = np.argsort(-(proportions * n - counts), kind="stable")
    counts[order[:remainder]] += 1
    return counts


def _stripe_templates(spec: SyntheticImagesDataset) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(spec.h), np.arange(spec.w), indexing="ij")
    templates = []
    for c in range(spec.classes):
        angle = np.pi * c / spec.classes
        cycles = 2 + c // 2
        coordinate = (rows * np.cos(angle) + cols * np.sin(angle)) / max(spec.h, spec.w)
        templates.append(0.5 + 0.5 * np.sin(2 * np.pi * cycles * coordinate))
    return np.stack([t.ravel() for t in templates])


def generate_synthetic(
    spec: Union[SyntheticBlobsDataset, SyntheticImagesDataset], seed: Union[int, np.random.Generator]
) -> Batch:
    """Deterministic class-conditional data; class counts follow class_weights exactly."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    counts = class_counts(spec.n, spec.class_weights, spec.classes)
    labels = np.repeat(np.arange(spec.classes), counts)

    if isinstance(spec, SyntheticBlobsDataset):
        if spec.classes <= spec.dim:
            means = np.eye(spec.classes, spec.dim) * spec.separation
        else:
            directions = rng.normal(size=(spec.classes, spec.dim))
            means = spec.separation * directions / np.linalg.norm(directions, axis=1, keepdims=True)
        inputs = means[labels] + rng.normal(size=(spec.n, spec.dim))
        image_shape: Tuple[int, ...] = ()
    else:
        templates = _stripe_templates(spec)
        amplitude = rng.uniform(0.5, 1.0, size=(spec.n, 1))
        noise = rng.normal(0.0, spec.noise, size=(spec.n, spec.h * spec.w))
        inputs = np.clip(0.5 + amplitude * (templates[labels] - 0.5) + noise, 0.0, 1.0)
        if spec.margin:
            frame = np.ones((spec.h, spec.w), dtype=bool)
            frame[spec.margin:spec.h - spec.margin, spec.margin:spec.w - spec.margin] = False
            inputs[:, frame.ravel()] = 0.0
        image_shape = (spec.h, spec.w)

    order = rng.permutation(spec.n)
    return Batch(inputs[order], labels[order], image_shape)


def _resolve(base: str, name: str) -> Path:
    return Path(base) / name


def load_dataset(spec: DatasetSpec, rng: np.random.Generator) -> DatasetSplit:
    """Materialize the train/test split an experiment trains and evaluates on."""
    if isinstance(spec, MnistIdxDataset):
        train = load_mnist_idx(_resolve(spec.path, spec.train_images), _resolve(spec.path, spec.train_labels), spec.train_cap)
        test = load_mnist_idx(_resolve(spec.path, spec.test_images), _resolve(spec.path, spec.test_labels), spec.test_cap)
        return DatasetSplit(train, test, dataset_classes(spec), "mnist")

    full = generate_synthetic(spec, rng)
    n_test = max(1, int(round(spec.test_fraction * spec.n)))
    if n_test >= spec.n:
        raise RejectedInputError("test split leaves no training data")
    test = full.subset(range(n_test))
    train = full.subset(range(n_test, spec.n))
    logger.info(f"Generated {spec.kind} data: {len(train)} train / {len(test)} test, image shape {dataset_image_shape(spec)}")
    return DatasetSplit(train, test, dataset_classes(spec), spec.kind)
