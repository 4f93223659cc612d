from enum import Enum
from typing import List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field
from typing_extensions import Annotated

CONFIG_FORMAT_VERSION = 1


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DpMode(str, Enum):
    """Gradient obfuscation applied to an update before it leaves the client."""
    none = "none"
    gaussian_noise = "gaussian_noise"
    value_clip = "value_clip"
    norm_clip = "norm_clip"
    prune = "prune"


class DpPolicy(StrictModel):
    """Exactly one obfuscation mode; parameters of inactive modes are ignored."""
    mode: DpMode = Field(DpMode.none, description="Active transform")
    sigma: float = Field(0.0, ge=0, description="Gaussian noise standard deviation")
    clip_bound: float = Field(1.0, gt=0, description="Clipping bound (value or L2 norm)")
    sparsity: float = Field(0.0, ge=0, lt=1, description="Fraction of smallest-magnitude coordinates zeroed")

    def label(self) -> str:
        if self.mode == DpMode.gaussian_noise:
            return f"noise_{self.sigma:g}"
        if self.mode in (DpMode.value_clip, DpMode.norm_clip):
            return f"{self.mode.value}_{self.clip_bound:g}"
        if self.mode == DpMode.prune:
            return f"prune_{self.sparsity:g}"
        return "none"


class DefensePolicy(StrictModel):
    """Byzantine-robust aggregation settings for the merge chaincode."""
    use_multikrum: bool = False
    f: int = Field(1, ge=0, description="Byzantine bound; Multi-KRUM needs 2f+2 < n")
    use_foolsgold: bool = False
    fg_history_rounds: int = Field(0, ge=0, description="Rounds kept in FoolsGold history; 0 keeps all")
    fg_confidence: float = Field(1.0, gt=0, description="Logit confidence (kappa)")
    n_k_cap: int = Field(1_000_000, ge=1, description="Ceiling on self-reported dataset sizes")


class BackdoorSpec(StrictModel):
    """Pixel-pattern backdoor trained with constrain-and-scale."""
    pattern: Optional[List[Tuple[int, float]]] = Field(
        None, description="(pixel index, value) overwrites; default is a 3-pixel corner at full intensity"
    )
    target_label: int = Field(0, ge=0)
    poison_fraction: float = Field(0.5, ge=0, le=1, description="Share of each local batch replaced by backdoor examples")
    alpha: float = Field(0.7, ge=0, le=1, description="Weight of the classification loss vs the anomaly loss")
    gamma: float = Field(1.0, gt=0, description="Scale factor applied before submission")
    lr_adv: float = Field(0.1, gt=0)
    epochs_adv: int = Field(5, ge=1)
    step_sched: Optional[List[int]] = Field(None, description="Epochs after which lr_adv is divided by step_rate")
    step_rate: float = Field(2.0, gt=1)
    eps_stop: float = Field(0.01, ge=0, description="Early stop once the backdoor loss falls below this")

    def resolved_step_sched(self) -> List[int]:
        if self.step_sched is not None:
            return list(self.step_sched)
        return [(2 * self.epochs_adv) // 3]


def corner_pattern(image_shape: Tuple[int, ...], input_dim: int, value: float = 1.0) -> List[Tuple[int, float]]:
    """Three pixels in the top-left corner (an L shape)."""
    width = image_shape[-1] if image_shape else max(int(round(input_dim ** 0.5)), 1)
    indices = [0, 1, width]
    return [(index, value) for index in indices if index < input_dim]


class AdversarySchedule(StrictModel):
    n_adversaries: int = Field(1, ge=0, description="Adversarial clients (indices 1..n_adversaries)")
    start_round: int = Field(0, ge=0)
    active_rounds: Optional[List[int]] = Field(None, description="Explicit rounds; None means every round from start_round")

    def is_active(self, round_index: int) -> bool:
        if round_index < self.start_round:
            return False
        return self.active_rounds is None or round_index in self.active_rounds


class NoAttack(StrictModel):
    kind: Literal["none"] = "none"
    n_adversaries: int = 0

    def is_active(self, round_index: int) -> bool:
        return False


class LabelFlipAttack(AdversarySchedule):
    kind: Literal["label_flip"] = "label_flip"
    c_src: int = Field(0, ge=0)
    c_target: int = Field(1, ge=0)
    fraction: float = Field(1.0, ge=0, le=1, description="Share of each cluster the flip is applied to")
    swap: bool = Field(False, description="Also relabel c_target as c_src")


class BackdoorAttack(AdversarySchedule):
    kind: Literal["backdoor"] = "backdoor"
    backdoor: BackdoorSpec = Field(default_factory=BackdoorSpec)


AttackScenario = Annotated[
    Union[NoAttack, LabelFlipAttack, BackdoorAttack], Field(discriminator="kind")
]


class MnistIdxDataset(StrictModel):
    kind: Literal["mnist_idx"] = "mnist_idx"
    path: str = Field(..., description="Directory holding the four IDX files")
    train_images: str = "train-images-idx3-ubyte"
    train_labels: str = "train-labels-idx1-ubyte"
    test_images: str = "t10k-images-idx3-ubyte"
    test_labels: str = "t10k-labels-idx1-ubyte"
    train_cap: int = Field(12000, ge=0)
    test_cap: int = Field(2000, ge=0)


class SyntheticBlobsDataset(StrictModel):
    kind: Literal["synthetic_blobs"] = "synthetic_blobs"
    n: int = Field(2000, ge=1)
    dim: int = Field(16, ge=1)
    classes: int = Field(4, ge=2)
    separation: float = Field(6.0, gt=0, description="Distance scale between class means")
    class_weights: Optional[List[float]] = None
    test_fraction: float = Field(0.2, gt=0, lt=1)


class SyntheticImagesDataset(StrictModel):
    kind: Literal["synthetic_images"] = "synthetic_images"
    n: int = Field(2000, ge=1)
    h: int = Field(8, ge=2)
    w: int = Field(8, ge=2)
    classes: int = Field(2, ge=2)
    noise: float = Field(0.15, ge=0)
    margin: int = Field(0, ge=0, description="Width of the all-zero frame around the stripes")
    class_weights: Optional[List[float]] = None
    test_fraction: float = Field(0.2, gt=0, lt=1)


DatasetSpec = Annotated[
    Union[MnistIdxDataset, SyntheticBlobsDataset, SyntheticImagesDataset],
    Field(discriminator="kind"),
]


def dataset_classes(dataset: DatasetSpec) -> int:
    if isinstance(dataset, MnistIdxDataset):
        return 10
    return dataset.classes


def dataset_input_dim(dataset: DatasetSpec) -> int:
    if isinstance(dataset, MnistIdxDataset):
        return 28 * 28
    if isinstance(dataset, SyntheticBlobsDataset):
        return dataset.dim
    return dataset.h * dataset.w


def dataset_image_shape(dataset: DatasetSpec) -> Tuple[int, ...]:
    if isinstance(dataset, MnistIdxDataset):
        return (28, 28)
    if isinstance(dataset, SyntheticImagesDataset):
        return (dataset.h, dataset.w)
    return ()


class ModelConfig(StrictModel):
    """Hidden layers of the MLP; input/output widths come from the dataset."""
    hidden: List[int] = Field(default_factory=lambda: [64, 64])
    activation: str = Field("relu", description="relu, tanh or sigmoid")


class DlgConfig(StrictModel):
    """Gradient-leakage experiment run by the `dlg` subcommand."""
    iters: int = Field(300, ge=1)
    hidden: List[int] = Field(default_factory=lambda: [16])
    activation: str = "sigmoid"
    sample_index: int = Field(0, ge=0)
    fd_step: float = Field(1e-6, gt=0, description="Central finite-difference step for the match-loss gradient")
    countermeasures: List[DpPolicy] = Field(
        default_factory=lambda: [
            DpPolicy(mode=DpMode.prune, sparsity=0.6),
            DpPolicy(mode=DpMode.value_clip, clip_bound=0.8),
            DpPolicy(mode=DpMode.gaussian_noise, sigma=0.01),
        ]
    )


class ChannelHyperparams(StrictModel):
    """Training parameters fixed when a channel is created."""
    t: int = Field(5, ge=1, description="Merge threshold on queued local blocks")
    c: int = Field(250, ge=1, description="Cluster size")
    epochs: int = Field(5, ge=1)
    lr: float = Field(0.1, gt=0)
    batch_size: int = Field(32, ge=1)
    dp: DpPolicy = Field(default_factory=DpPolicy)
    defense: DefensePolicy = Field(default_factory=DefensePolicy)


class ExperimentConfig(StrictModel):
    """Full declarative description of one simulated run."""
    format_version: Literal[1] = CONFIG_FORMAT_VERSION
    name: str = "experiment"
    seed: int = 0
    dataset: DatasetSpec
    n_clients: int = Field(20, ge=1)
    dirichlet_alpha: float = Field(0.9, gt=0)
    model: ModelConfig = Field(default_factory=ModelConfig)

    t: int = Field(5, ge=1)
    c: int = Field(250, ge=1)
    epochs: int = Field(5, ge=1)
    lr: float = Field(0.1, gt=0)
    batch_size: int = Field(32, ge=1)

    dp: DpPolicy = Field(default_factory=DpPolicy)
    defense: DefensePolicy = Field(default_factory=DefensePolicy)
    attack: AttackScenario = Field(default_factory=NoAttack)

    rounds: int = Field(40, ge=0, description="Round budget")
    target_accuracy: Optional[float] = Field(None, gt=0, le=1, description="Optional early-stop accuracy")
    n_endorsing_peers: int = Field(5, ge=1)
    genesis_pretrain_epochs: int = Field(0, ge=0)
    n_k_source: Literal["dataset", "cluster"] = "dataset"
    record_wallclock: bool = False
    output_dir: Optional[str] = None
    dlg: DlgConfig = Field(default_factory=DlgConfig)

    def hyperparams(self) -> ChannelHyperparams:
        return ChannelHyperparams(
            t=self.t, c=self.c, epochs=self.epochs, lr=self.lr,
            batch_size=self.batch_size, dp=self.dp, defense=self.defense,
        )
