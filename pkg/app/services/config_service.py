import copy
import json
import logging
from pathlib import Path
from typing import Any, List, Optional, Tuple, Union

from pydantic import ValidationError

from app.core.errors import ConfigParseError, ConfigValidationError
from app.models.nn import ACTIVATIONS
from app.schemas.experiment import (
    BackdoorAttack,
    ExperimentConfig,
    LabelFlipAttack,
    MnistIdxDataset,
    dataset_classes,
    dataset_input_dim,
)

logger = logging.getLogger(__name__)


def _format_location(loc) -> str:
    return ".".join(str(part) for part in loc) or "<root>"


def _dataset_problems(config: ExperimentConfig) -> List[str]:
    problems = []
    dataset = config.dataset
    if isinstance(dataset, MnistIdxDataset):
        for field_name in ("train_images", "train_labels", "test_images", "test_labels"):
            path = Path(dataset.path) / getattr(dataset, field_name)
            if not path.is_file():
                problems.append(f"dataset.{field_name}: file not found: {path}")
        if dataset.train_cap < config.n_clients:
            problems.append(
                f"dataset.train_cap: {dataset.train_cap} examples cannot cover n_clients={config.n_clients}"
            )
        if dataset.test_cap < 1:
            problems.append("dataset.test_cap: evaluation needs at least one test example")
        return problems

    n_train = dataset.n - max(1, int(round(dataset.test_fraction * dataset.n)))
    if n_train < config.n_clients:
        problems.append(
            f"dataset.n: {n_train} training examples cannot cover n_clients={config.n_clients}"
        )
    if getattr(dataset, "margin", 0) and 2 * dataset.margin >= min(dataset.h, dataset.w):
        problems.append(
            f"dataset.margin: a {dataset.margin}-pixel frame leaves no content in a {dataset.h}x{dataset.w} image"
        )
    if dataset.class_weights is not None:
        if len(dataset.class_weights) != dataset.classes:
            problems.append(
                f"dataset.class_weights: expected {dataset.classes} weights, got {len(dataset.class_weights)}"
            )
        elif any(w < 0 for w in dataset.class_weights) or sum(dataset.class_weights) <= 0:
            problems.append("dataset.class_weights: weights must be non-negative with a positive sum")
    if config.dlg.sample_index >= n_train:
        problems.append(f"dlg.sample_index: {config.dlg.sample_index} outside the {n_train} training examples")
    return problems


def semantic_problems(config: ExperimentConfig) -> List[str]:
    """Cross-field constraints that field-level bounds cannot express."""
    problems = _dataset_problems(config)
    n_classes = dataset_classes(config.dataset)
    input_dim = dataset_input_dim(config.dataset)

    defense = config.defense
    if defense.use_multikrum and 2 * defense.f + 2 >= config.n_clients:
        problems.append(
            f"defense.f: multi-krum requires 2f+2 < N, got 2*{defense.f}+2={2 * defense.f + 2} "
            f">= N={config.n_clients}"
        )

    for label, activation in (("model.activation", config.model.activation), ("dlg.activation", config.dlg.activation)):
        if activation not in ACTIVATIONS:
            problems.append(f"{label}: unknown activation '{activation}', expected one of {list(ACTIVATIONS)}")
    for label, hidden in (("model.hidden", config.model.hidden), ("dlg.hidden", config.dlg.hidden)):
        if any(width < 1 for width in hidden):
            problems.append(f"{label}: layer widths must be >= 1")

    attack = config.attack
    if attack.n_adversaries > config.n_clients - 1:
        problems.append(
            f"attack.n_adversaries: {attack.n_adversaries} adversaries need at least "
            f"{attack.n_adversaries + 1} clients (client 0 creates the channel), got {config.n_clients}"
        )
    if isinstance(attack, LabelFlipAttack):
        if attack.c_src == attack.c_target:
            problems.append("attack.c_target: must differ from c_src")
        for name in ("c_src", "c_target"):
            if getattr(attack, name) >= n_classes:
                problems.append(f"attack.{name}: class {getattr(attack, name)} outside [0, {n_classes})")
    if isinstance(attack, BackdoorAttack):
        backdoor = attack.backdoor
        if backdoor.target_label >= n_classes:
            problems.append(
                f"attack.backdoor.target_label: class {backdoor.target_label} outside [0, {n_classes})"
            )
        for index, _ in backdoor.pattern or []:
            if not 0 <= index < input_dim:
                problems.append(f"attack.backdoor.pattern: pixel {index} outside input width {input_dim}")
        for epoch in backdoor.step_sched or []:
            if not 1 <= epoch <= backdoor.epochs_adv:
                problems.append(f"attack.backdoor.step_sched: epoch {epoch} outside [1, {backdoor.epochs_adv}]")
    return problems


def _resolve_paths(config: ExperimentConfig, base_dir: Path) -> ExperimentConfig:
    dataset = config.dataset
    if isinstance(dataset, MnistIdxDataset) and not Path(dataset.path).is_absolute():
        resolved = dataset.model_copy(update={"path": str((base_dir / dataset.path).resolve())})
        return config.model_copy(update={"dataset": resolved})
    return config


def _without(data: Any, loc: Tuple) -> Any:
    """Deep copy of `data` with the field at `loc` removed.

    Location parts that are not keys (union tags) are skipped. An error
    inside a list removes the whole list field.
    """
    data = copy.deepcopy(data)
    node, owner, key = data, None, None
    found = False
    for part in loc:
        found = False
        if isinstance(node, dict) and part in node:
            owner, key, found = node, part, True
            node = node[part]
        elif isinstance(node, list) and isinstance(part, int) and 0 <= part < len(node):
            found = owner is not None
            break
    if found:
        del owner[key]
    return data


def _partial_config(data: dict, errors: List[dict]) -> Optional[ExperimentConfig]:
    """The config with every field-level error replaced by its default, if that validates."""
    for _ in range(3):
        for err in errors:
            data = _without(data, err["loc"])
        try:
            return ExperimentConfig.model_validate(data)
        except ValidationError as e:
            errors = e.errors()
    return None


def parse_config(data: dict, base_dir: Union[str, Path] = ".") -> ExperimentConfig:
    """Validate a decoded config tree, reporting every violated constraint.

    Field errors and cross-field problems are reported together. When fields
    fail validation, the cross-field checks run on a copy with those fields
    reset to their defaults.
    """
    problems: List[str] = []
    try:
        config = ExperimentConfig.model_validate(data)
    except ValidationError as e:
        problems = [f"{_format_location(err['loc'])}: {err['msg']}" for err in e.errors()]
        config = _partial_config(data, e.errors())
        if config is None:
            raise ConfigValidationError(problems) from e
    config = _resolve_paths(config, Path(base_dir))
    for problem in semantic_problems(config):
        if problem not in problems:
            problems.append(problem)
    if problems:
        raise ConfigValidationError(problems)
    return config


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """
    Load and validate an experiment config file.

    Args:
        path: JSON file whose first key is format_version

    Returns:
        Fully validated ExperimentConfig

    Raises:
        ConfigParseError: malformed JSON, with line and column
        ConfigValidationError: every violated constraint with its field path
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        logger.error(f"Error reading config {path}: {e}")
        raise ConfigValidationError([f"{path}: cannot read config ({e.strerror or e})"]) from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigParseError(str(path), e.msg, e.lineno, e.colno) from e
    if not isinstance(data, dict):
        raise ConfigValidationError(["<root>: config must be a JSON object"])
    return parse_config(data, base_dir=path.parent)
