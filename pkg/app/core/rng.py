"""Seeded random streams for reproducible simulations.

One master seed fans out into named, indexed child generators. The child
seed depends only on (master seed, name, index), never on the order in which
streams are requested, so per-client results are schedule-independent.
"""

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


class SeedStreams:
    """Factory of independent numpy Generators derived from one master seed."""

    def __init__(self, master_seed: int):
        self._seed = int(master_seed)

    @property
    def seed(self) -> int:
        return self._seed

    def stream(self, name: str, index: int = 0) -> np.random.Generator:
        sequence = np.random.SeedSequence(
            entropy=self._seed, spawn_key=(_name_key(name), int(index))
        )
        return np.random.Generator(np.random.PCG64(sequence))

    def fork(self, name: str) -> "SeedStreams":
        """Child factory for a sub-task with its own namespace."""
        child_seed = int(self.stream(f"fork:{name}").integers(0, 2**63 - 1))
        return SeedStreams(child_seed)
