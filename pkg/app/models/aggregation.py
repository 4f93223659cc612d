"""Value types handled by the merge chaincode."""

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from app.core.errors import RejectedInputError
from app.models.nn import GradientVector, ModelParams


@dataclass(frozen=True, eq=False)
class LocalUpdate:
    """One client's shared update as read back from a local block."""

    client_id: str
    update: GradientVector
    n_k: int
    round: int
    block_hash: Optional[str] = None

    @property
    def key(self) -> str:
        """Unique per merge: a client may have blocks from several rounds queued."""
        return f"{self.client_id}/{self.round}"


class UpdateSet:
    """Ordered collection of local updates sharing one model spec."""

    def __init__(self, updates: Sequence[LocalUpdate]):
        updates = list(updates)
        seen = set()
        fingerprints = {u.update.spec_fingerprint for u in updates}
        if len(fingerprints) > 1:
            raise RejectedInputError("update set mixes model specs")
        for u in updates:
            if u.n_k < 1:
                raise RejectedInputError(f"client {u.client_id} claims n_k={u.n_k}, must be >= 1")
            if u.key in seen:
                raise RejectedInputError(f"client {u.client_id} submitted twice in round {u.round}")
            seen.add(u.key)
        self._updates = updates

    def __len__(self) -> int:
        return len(self._updates)

    def __iter__(self) -> Iterator[LocalUpdate]:
        return iter(self._updates)

    @property
    def keys(self) -> List[str]:
        return [u.key for u in self._updates]

    @property
    def client_ids(self) -> List[str]:
        return sorted({u.client_id for u in self._updates})

    @property
    def fingerprint(self) -> Optional[str]:
        return self._updates[0].update.spec_fingerprint if self._updates else None

    def matrix(self) -> np.ndarray:
        """(n, dim) stack of update values."""
        return np.stack([u.update.values for u in self._updates])

    def subset(self, keys: Sequence[str]) -> "UpdateSet":
        wanted = set(keys)
        return UpdateSet([u for u in self._updates if u.key in wanted])


@dataclass
class KrumSelection:
    selected: UpdateSet
    rejected: List[str]
    scores: Dict[str, float]


class FgHistory:
    """
    Per-client accumulated updates for FoolsGold.

    With history_rounds > 0 only contributions from the most recent
    history_rounds rounds are summed.
    """

    def __init__(self, history_rounds: int = 0):
        self.history_rounds = history_rounds
        self._contributions: Dict[str, List[tuple]] = defaultdict(list)
        self._dim: Optional[int] = None
        self._fingerprint: Optional[str] = None

    def __contains__(self, client_id: str) -> bool:
        return client_id in self._contributions

    @property
    def client_ids(self) -> List[str]:
        return sorted(self._contributions)

    def ensure(self, client_id: str) -> None:
        """Register a client with a zero accumulator."""
        self._contributions.setdefault(client_id, [])

    def record(self, client_id: str, update: GradientVector, round_index: int) -> None:
        if self._fingerprint is None:
            self._fingerprint = update.spec_fingerprint
            self._dim = len(update)
        update.require_compatible(self._fingerprint)
        self._contributions[client_id].append((round_index, update.values))

    def accumulated(self, client_id: str, current_round: Optional[int] = None) -> np.ndarray:
        if self._dim is None:
            raise RejectedInputError("history is empty")
        total = np.zeros(self._dim)
        for round_index, values in self._contributions.get(client_id, []):
            if (
                self.history_rounds > 0
                and current_round is not None
                and round_index <= current_round - self.history_rounds
            ):
                continue
            total += values
        return total


@dataclass
class MergeOutcome:
    """Result of ModelAggregate over one batch of queued local blocks."""

    params: ModelParams
    selected: List[str]
    rejected: List[str]
    scores: Dict[str, float] = field(default_factory=dict)
    fg_weights: Dict[str, float] = field(default_factory=dict)
    weights: Dict[str, float] = field(default_factory=dict)
    fg_fallback: bool = False
    aborted: bool = False

    def meta(self, consumed: Sequence[str]) -> dict:
        return {
            "consumed": list(consumed),
            "selected": list(self.selected),
            "rejected": list(self.rejected),
            "scores": dict(sorted(self.scores.items())),
            "fg_weights": dict(sorted(self.fg_weights.items())),
            "weights": dict(sorted(self.weights.items())),
            "fg_fallback": self.fg_fallback,
            "aborted": self.aborted,
        }
