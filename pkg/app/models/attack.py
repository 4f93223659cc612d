from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from app.models.nn import GradientVector, ModelParams


@dataclass(frozen=True, eq=False)
class AnomalyReference:
    """What the attacker believes a benign update from `base` looks like."""

    base: ModelParams
    benign_update: GradientVector


@dataclass
class DlgResult:
    """Trajectory of one gradient-leakage reconstruction."""

    dummy_inputs: List[np.ndarray] = field(default_factory=list)
    dummy_labels: List[np.ndarray] = field(default_factory=list)
    match_loss: List[float] = field(default_factory=list)
    mse: List[Optional[float]] = field(default_factory=list)
    diverged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.match_loss)

    @property
    def final_match_loss(self) -> Optional[float]:
        return self.match_loss[-1] if self.match_loss else None

    @property
    def final_mse(self) -> Optional[float]:
        return self.mse[-1] if self.mse else None

    @property
    def reconstruction(self) -> Optional[np.ndarray]:
        return self.dummy_inputs[-1] if self.dummy_inputs else None
