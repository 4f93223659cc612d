from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np

from app.core.errors import RejectedInputError
from app.models.ledger import Identity
from app.models.nn import Batch
from app.schemas.experiment import BackdoorAttack, LabelFlipAttack

Behavior = Optional[Union[LabelFlipAttack, BackdoorAttack]]


@dataclass
class ClientState:
    """
    One participant of a channel.

    The private dataset is split into shards of at most `cluster_size`
    examples; `cursor` points at the next unused shard in `shard_order`.
    """

    index: int
    identity: Identity
    data: Batch
    cluster_size: int
    rng: np.random.Generator
    dp_rng: np.random.Generator
    attack_rng: np.random.Generator
    behavior: Behavior = None
    peer: Optional[Identity] = None
    alive: bool = True
    shards: List[np.ndarray] = field(default_factory=list)
    shard_order: List[int] = field(default_factory=list)
    cursor: int = 0
    passes: int = 0

    def __post_init__(self):
        if len(self.data) == 0:
            raise RejectedInputError(f"client {self.index} has no data")
        if self.cluster_size < 1:
            raise RejectedInputError("cluster size must be >= 1")
        if not self.shards:
            order = self.rng.permutation(len(self.data))
            self.shards = [
                order[start:start + self.cluster_size]
                for start in range(0, len(order), self.cluster_size)
            ]
            self.shard_order = list(range(len(self.shards)))

    @property
    def id(self) -> str:
        return self.identity.hex

    @property
    def is_adversary(self) -> bool:
        return self.behavior is not None

    def is_attacking(self, round_index: int) -> bool:
        return self.behavior is not None and self.behavior.is_active(round_index)
